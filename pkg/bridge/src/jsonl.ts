/** Canonical JSONL: alphabetical keys, compact separators, LF endings. */

import type { ScoredTrace } from './types.js';
import { FORMAT_VERSION } from './types.js';

function sortValue(value: unknown): unknown {
  if (Array.isArray(value)) return value.map(sortValue);
  if (value !== null && typeof value === 'object') {
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(value as Record<string, unknown>).sort()) {
      out[key] = sortValue((value as Record<string, unknown>)[key]);
    }
    return out;
  }
  if (typeof value === 'number' && !Number.isFinite(value)) {
    throw new Error('non-finite number on the wire');
  }
  return value;
}

export function canonicalLine(obj: Record<string, unknown>): string {
  return JSON.stringify(sortValue(obj));
}

export function encodeTrace(trace: ScoredTrace): Record<string, unknown> {
  return {
    format_version: FORMAT_VERSION,
    query_text: trace.query_text,
    response_text: trace.response_text,
    sample_id: trace.sample_id,
    tokens: trace.tokens.map((t) => ({
      logp_amateur: t.logp_amateur,
      logp_expert: t.logp_expert,
      token_id: t.token_id,
      token_text: t.token_text,
    })),
  };
}

export function decodeTrace(obj: Record<string, unknown>): ScoredTrace {
  const tokens = obj.tokens;
  if (!Array.isArray(tokens)) throw new Error('trace record has no tokens array');
  return {
    sample_id: String(obj.sample_id),
    query_text: String(obj.query_text),
    response_text: String(obj.response_text),
    tokens: tokens.map((t) => ({
      token_id: Number(t.token_id),
      token_text: String(t.token_text),
      logp_amateur: Number(t.logp_amateur),
      logp_expert: Number(t.logp_expert),
    })),
  };
}

export function parseJsonl(text: string): Record<string, unknown>[] {
  const records: Record<string, unknown>[] = [];
  const lines = text.split('\n');
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i].trim();
    if (!line) continue;
    let parsed: unknown;
    try {
      parsed = JSON.parse(line);
    } catch (err) {
      throw new Error(`line ${i + 1}: invalid JSON: ${(err as Error).message}`);
    }
    if (parsed === null || typeof parsed !== 'object' || Array.isArray(parsed)) {
      throw new Error(`line ${i + 1}: record is not an object`);
    }
    records.push(parsed as Record<string, unknown>);
  }
  return records;
}
