/**
 * Turn (query, response) pairs into trace records: both roles' per-token
 * log-probabilities in one trace, amateur from the bare backbone and
 * expert from the adapter-equipped one.
 */

import type { InferenceBackend } from './backend.js';
import type { ScoredTrace, ScorePair } from './types.js';
import { validateTrace } from './validate.js';

export interface ScoreFailure {
  sample_id: string;
  reason: string;
}

export interface ScoreResult {
  traces: ScoredTrace[];
  failures: ScoreFailure[];
}

/**
 * Score every pair under both roles. A failing record is reported and the
 * batch continues; emitted traces are guaranteed to pass validation.
 */
export async function scorePairs(
  pairs: ScorePair[],
  amateur: InferenceBackend,
  expert: InferenceBackend,
): Promise<ScoreResult> {
  const traces: ScoredTrace[] = [];
  const failures: ScoreFailure[] = [];
  for (const pair of pairs) {
    try {
      if (!pair.response_text) throw new Error('empty response');
      const amateurSteps = await amateur.scoreTokens(pair.query_text, pair.response_text);
      const expertSteps = await expert.scoreTokens(pair.query_text, pair.response_text);
      if (amateurSteps.length !== expertSteps.length) {
        throw new Error(`role tokenizations differ: ${amateurSteps.length} vs ${expertSteps.length} tokens`);
      }
      const trace: ScoredTrace = {
        sample_id: pair.sample_id,
        query_text: pair.query_text,
        response_text: pair.response_text,
        tokens: amateurSteps.map((step, i) => {
          if (step.tokenId !== expertSteps[i].tokenId) {
            throw new Error(`role token ids differ at position ${i}`);
          }
          return {
            token_id: step.tokenId,
            token_text: step.tokenText,
            logp_amateur: step.logprob,
            logp_expert: expertSteps[i].logprob,
          };
        }),
      };
      const violations = validateTrace(trace);
      if (violations.length > 0) {
        throw new Error(`invalid trace: ${violations.map((v) => v.message).join('; ')}`);
      }
      traces.push(trace);
    } catch (err) {
      failures.push({ sample_id: pair.sample_id, reason: (err as Error).message });
    }
  }
  return { traces, failures };
}
