/**
 * Line-protocol server: one JSON request per stdin line, one response per
 * stdout line. Serves both "generate" and "score" so the pipeline can use
 * a bridge process anywhere it would use the toy server.
 */

import * as readline from 'node:readline';
import type { Readable, Writable } from 'node:stream';

import type { InferenceBackend } from './backend.js';
import { canonicalLine, encodeTrace } from './jsonl.js';
import { scorePairs } from './scorePairs.js';
import { genRequestFrom, scorePairFrom } from './types.js';

export interface ServeOptions {
  generator: InferenceBackend;
  amateur?: InferenceBackend;
  expert?: InferenceBackend;
  input?: Readable;
  output?: Writable;
}

/**
 * Serve until the input stream closes. Malformed or failing requests are
 * answered with an error record; the loop never dies on a single request.
 */
export async function serve(options: ServeOptions): Promise<void> {
  const input = options.input ?? process.stdin;
  const output = options.output ?? process.stdout;
  const rl = readline.createInterface({ input, crlfDelay: Infinity });

  const emit = (obj: Record<string, unknown>) => {
    output.write(canonicalLine(obj) + '\n');
  };

  for await (const line of rl) {
    const trimmed = line.trim();
    if (!trimmed) continue;
    try {
      const obj = JSON.parse(trimmed) as Record<string, unknown>;
      if (obj === null || typeof obj !== 'object') throw new Error('request is not an object');
      if (obj.kind === 'generate') {
        const request = genRequestFrom(obj);
        const response = await options.generator.generate(request);
        emit({
          finish_reason: response.finish_reason,
          kind: 'result',
          seed: response.seed,
          text: response.text,
        });
      } else if (obj.kind === 'score') {
        const amateur = options.amateur;
        const expert = options.expert ?? amateur;
        if (!amateur || !expert) throw new Error('scoring roles not configured');
        const pair = scorePairFrom(obj);
        const { traces, failures } = await scorePairs([pair], amateur, expert);
        if (failures.length > 0) throw new Error(failures[0].reason);
        emit({ kind: 'trace', trace: encodeTrace(traces[0]) });
      } else if (obj.kind === 'shutdown') {
        emit({ kind: 'ok' });
        rl.close();
        return;
      } else {
        throw new Error(`unknown request kind ${JSON.stringify(obj.kind)}`);
      }
    } catch (err) {
      emit({ kind: 'error', message: (err as Error).message });
    }
  }
}
