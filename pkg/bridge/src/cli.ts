#!/usr/bin/env node
/**
 * titok-bridge: score pairs into trace JSONL, or serve the line protocol.
 *
 *   titok-bridge score --pairs pairs.jsonl --out traces.jsonl \
 *       --backend http://localhost:8080 --model base --adapter task-lora
 *   titok-bridge serve --backend mock: --model demo
 *
 * --backend accepts an http(s) URL (OpenAI-style completions server) or
 * "mock:" for the built-in deterministic stand-in. With --adapter the
 * expert role is enabled; without it only the amateur role exists and
 * scoring is refused.
 */

import * as fs from 'node:fs';

import { HttpBackend, MockBackend, type InferenceBackend } from './backend.js';
import { serve } from './generator.js';
import { canonicalLine, encodeTrace, parseJsonl } from './jsonl.js';
import { scorePairs } from './scorePairs.js';
import { scorePairFrom, type EndpointSpec } from './types.js';

interface Args {
  command: string;
  flags: Map<string, string>;
}

function parseArgs(argv: string[]): Args {
  const [command, ...rest] = argv;
  const flags = new Map<string, string>();
  for (let i = 0; i < rest.length; i++) {
    const arg = rest[i];
    if (!arg.startsWith('--')) throw new Error(`unexpected argument ${arg}`);
    const value = rest[i + 1];
    if (value === undefined || value.startsWith('--')) {
      flags.set(arg.slice(2), 'true');
    } else {
      flags.set(arg.slice(2), value);
      i++;
    }
  }
  return { command: command ?? '', flags };
}

function buildBackend(flags: Map<string, string>, role: 'amateur' | 'expert'): InferenceBackend {
  const locator = flags.get('backend');
  const model = flags.get('model');
  if (!locator || !model) throw new Error('--backend and --model are required');
  const spec: EndpointSpec = {
    model,
    adapter: role === 'expert' ? flags.get('adapter') : undefined,
    device: flags.get('device'),
    batchSize: flags.has('batch-size') ? Number(flags.get('batch-size')) : undefined,
    dtype: flags.get('dtype'),
  };
  if (locator === 'mock:') {
    return new MockBackend({ spec });
  }
  if (locator.startsWith('http://') || locator.startsWith('https://')) {
    return new HttpBackend({ spec, baseUrl: locator });
  }
  throw new Error(`unsupported backend locator ${locator}`);
}

async function cmdScore(flags: Map<string, string>): Promise<number> {
  const pairsPath = flags.get('pairs');
  const outPath = flags.get('out');
  if (!pairsPath || !outPath) throw new Error('--pairs and --out are required');
  if (!flags.get('adapter')) throw new Error('scoring needs --adapter: without it there is no expert role');
  const amateur = buildBackend(flags, 'amateur');
  const expert = buildBackend(flags, 'expert');
  const pairs = parseJsonl(fs.readFileSync(pairsPath, 'utf-8')).map(scorePairFrom);
  const { traces, failures } = await scorePairs(pairs, amateur, expert);
  const lines = traces.map((t) => canonicalLine(encodeTrace(t)));
  fs.writeFileSync(outPath, lines.join('\n') + (lines.length ? '\n' : ''), 'utf-8');
  for (const failure of failures) {
    console.error(`skipped ${failure.sample_id}: ${failure.reason}`);
  }
  console.error(`scored ${traces.length}/${pairs.length} pairs -> ${outPath}`);
  return failures.length > 0 ? 1 : 0;
}

async function cmdServe(flags: Map<string, string>): Promise<number> {
  const generator = buildBackend(flags, 'expert');
  const amateur = buildBackend(flags, 'amateur');
  const expert = flags.get('adapter') ? generator : undefined;
  await serve({ generator, amateur, expert });
  return 0;
}

export async function main(argv: string[]): Promise<number> {
  const { command, flags } = parseArgs(argv);
  switch (command) {
    case 'score':
      return cmdScore(flags);
    case 'serve':
      return cmdServe(flags);
    default:
      console.error('usage: titok-bridge <score|serve> [--flags]');
      return 2;
  }
}

const invokedDirectly = process.argv[1] && import.meta.url.endsWith(process.argv[1].split('/').pop() ?? '');
if (invokedDirectly) {
  main(process.argv.slice(2)).then(
    (code) => process.exit(code),
    (err) => {
      console.error(String(err instanceof Error ? err.message : err));
      process.exit(2);
    },
  );
}
