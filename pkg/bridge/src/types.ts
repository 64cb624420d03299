/**
 * Wire types shared with the pipeline: trace records, generation requests
 * and responses, and the endpoint spec describing a checkpoint pair.
 *
 * Field names and semantics mirror docs/wire_formats.md and
 * docs/endpoint_protocol.md in the repository root; keys are emitted in
 * alphabetical order so files compare byte-for-byte with pipeline output.
 */

export const FORMAT_VERSION = 1;

export interface TokenRecord {
  token_id: number;
  token_text: string;
  /** log P under the bare backbone, nats, finite and <= 0 */
  logp_amateur: number;
  /** log P under backbone + adapter, nats, finite and <= 0 */
  logp_expert: number;
}

export interface ScoredTrace {
  sample_id: string;
  query_text: string;
  response_text: string;
  tokens: TokenRecord[];
}

export interface ScorePair {
  sample_id: string;
  query_text: string;
  response_text: string;
}

export interface GenRequest {
  prompt: string;
  temperature: number;
  top_p: number;
  max_tokens: number;
  seed: number;
  greedy: boolean;
  stop_markers: string[];
}

export type FinishReason = 'stop' | 'length' | 'marker';

export interface GenResponse {
  text: string;
  finish_reason: FinishReason;
  seed: number;
}

/**
 * A checkpoint pair behind one backend. An adapter locator present means
 * the expert role is available; without it the bridge can only serve the
 * amateur role.
 */
export interface EndpointSpec {
  model: string;
  adapter?: string;
  device?: string;
  batchSize?: number;
  dtype?: string;
}

export const DEFAULT_GEN_REQUEST: Omit<GenRequest, 'prompt'> = {
  temperature: 1.0,
  top_p: 1.0,
  max_tokens: 64,
  seed: 0,
  greedy: false,
  stop_markers: [],
};

export function genRequestFrom(obj: Record<string, unknown>): GenRequest {
  if (typeof obj.prompt !== 'string') throw new Error('generate request needs a string prompt');
  return {
    prompt: obj.prompt,
    temperature: typeof obj.temperature === 'number' ? obj.temperature : DEFAULT_GEN_REQUEST.temperature,
    top_p: typeof obj.top_p === 'number' ? obj.top_p : DEFAULT_GEN_REQUEST.top_p,
    max_tokens: typeof obj.max_tokens === 'number' ? obj.max_tokens : DEFAULT_GEN_REQUEST.max_tokens,
    seed: typeof obj.seed === 'number' ? obj.seed : DEFAULT_GEN_REQUEST.seed,
    greedy: obj.greedy === true,
    stop_markers: Array.isArray(obj.stop_markers) ? obj.stop_markers.map(String) : [],
  };
}

export function scorePairFrom(obj: Record<string, unknown>): ScorePair {
  for (const key of ['sample_id', 'query_text', 'response_text'] as const) {
    if (typeof obj[key] !== 'string') throw new Error(`score request needs a string ${key}`);
  }
  return {
    sample_id: obj.sample_id as string,
    query_text: obj.query_text as string,
    response_text: obj.response_text as string,
  };
}
