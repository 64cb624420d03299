/** Trace validation mirroring the pipeline's verdict contract. */

import type { ScoredTrace } from './types.js';

export interface Violation {
  message: string;
  token_index?: number;
}

/** Empty array means the trace is well formed. */
export function validateTrace(trace: ScoredTrace): Violation[] {
  const violations: Violation[] = [];
  if (trace.tokens.length === 0) {
    violations.push({ message: 'empty response' });
    return violations;
  }
  trace.tokens.forEach((tok, i) => {
    if (tok.token_id < 0) violations.push({ message: 'negative token_id', token_index: i });
    if (!Number.isFinite(tok.logp_amateur) || !Number.isFinite(tok.logp_expert)) {
      violations.push({ message: 'non-finite logp', token_index: i });
    } else if (tok.logp_amateur > 0 || tok.logp_expert > 0) {
      violations.push({ message: 'positive logp', token_index: i });
    }
  });
  const concat = trace.tokens.map((t) => t.token_text).join('');
  if (concat !== trace.response_text) {
    violations.push({ message: 'response text mismatch' });
  }
  return violations;
}
