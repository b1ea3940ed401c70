#!/usr/bin/env node
/** kdve-export: encode image tiles and concept prompts into KDVE files.
 *
 * Commands:
 *   export-images  --manifest M --tiles T --out F [--model builtin-512]
 *                  [--instances tokens|subtiles|pooled] [--dim N]
 *                  [--batch-size N] [--device cpu] [--dry-run]
 *   export-prompts --prompts P --out F [--model builtin-512] [--dim N]
 *                  [--dry-run]
 */
import { parseArgs } from 'node:util';

import { DEFAULT_MODEL, InstanceMode, checkDim, loadEncoder } from './encoder.js';
import { writeBags } from './kdve.js';
import { exportImageBags } from './images.js';
import { exportPrompts } from './prompts.js';

function fail(message: string): never {
  console.error(`error: ${message}`);
  process.exit(1);
}

export function run(argv: string[]): number {
  const command = argv[0];
  if (!command || command === '--help' || command === '-h') {
    console.log(
      'usage: kdve-export <export-images|export-prompts> [options]\n' +
        'see the package README for the option list',
    );
    return command ? 0 : 1;
  }
  const { values } = parseArgs({
    args: argv.slice(1),
    options: {
      manifest: { type: 'string' },
      tiles: { type: 'string' },
      prompts: { type: 'string' },
      out: { type: 'string' },
      model: { type: 'string', default: DEFAULT_MODEL },
      instances: { type: 'string', default: 'tokens' },
      dim: { type: 'string' },
      'batch-size': { type: 'string', default: '32' },
      device: { type: 'string', default: 'cpu' },
      'dry-run': { type: 'boolean', default: false },
    },
  });

  if (values.device !== 'cpu') {
    fail(`device '${values.device}' unavailable; the built-in encoder is cpu-only`);
  }
  const encoder = loadEncoder(values.model as string);
  checkDim(encoder, values.dim === undefined ? undefined : parseInt(values.dim, 10));

  if (command === 'export-images') {
    if (!values.manifest || !values.tiles) fail('export-images needs --manifest and --tiles');
    const instances = values.instances as InstanceMode;
    if (!['tokens', 'subtiles', 'pooled'].includes(instances)) {
      fail(`unknown --instances '${instances}'`);
    }
    const bags = exportImageBags({
      manifestPath: values.manifest,
      tileIndexPath: values.tiles,
      encoder,
      instances,
      batchSize: Math.max(1, parseInt(values['batch-size'] as string, 10)),
    });
    const perBag = bags.length > 0 ? bags[0].n : 0;
    console.log(
      `${bags.length} bags, ${perBag} instances/bag, dim ${encoder.dim}, ` +
        `model ${encoder.name}, mode ${instances}`,
    );
    if (!values['dry-run']) {
      if (!values.out) fail('export-images needs --out (or --dry-run)');
      writeBags(bags, values.out);
      console.log(`wrote ${values.out}`);
    }
    return 0;
  }

  if (command === 'export-prompts') {
    if (!values.prompts) fail('export-prompts needs --prompts');
    const bags = exportPrompts({ promptPath: values.prompts, encoder });
    console.log(`${bags.length} prompt rows, dim ${encoder.dim}, model ${encoder.name}`);
    if (!values['dry-run']) {
      if (!values.out) fail('export-prompts needs --out (or --dry-run)');
      writeBags(bags, values.out);
      console.log(`wrote ${values.out}`);
    }
    return 0;
  }

  fail(`unknown command '${command}'`);
}

import { pathToFileURL } from 'node:url';

if (process.argv[1] && import.meta.url === pathToFileURL(process.argv[1]).href) {
  try {
    process.exit(run(process.argv.slice(2)));
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    process.exit(2);
  }
}
