/** Round trip into the consuming Python pipeline: exported KDVE files must
 * load there, prompt rows must form a valid concept set, and an exported
 * bag + concepts must drive its classifier head end to end. */
import { execFileSync } from 'node:child_process';
import { mkdtempSync, writeFileSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';
import { describe, expect, it } from 'vitest';

import { BuiltinEncoder } from '../src/encoder.js';
import { writeBags } from '../src/kdve.js';
import { exportImageBags } from '../src/images.js';
import { exportPrompts } from '../src/prompts.js';
import { SIX_PROMPTS, writeFixture } from './helpers.js';

function python(code: string): string {
  return execFileSync('python3', ['-c', code], { encoding: 'utf-8' });
}

function hasPlexkit(): boolean {
  try {
    python('import plexkit');
    return true;
  } catch {
    return false;
  }
}

describe.skipIf(!hasPlexkit())('pipeline interop', () => {
  const encoder = new BuiltinEncoder(512);

  it('exported tile bags pass the pipeline reader', () => {
    const dir = mkdtempSync(join(tmpdir(), 'interop-'));
    const { manifestPath, tileIndexPath } = writeFixture(dir, [
      { x: 0, y: 0, label: 'plexus' },
      { x: 112, y: 112, label: 'no_plexus' },
    ]);
    const bagsPath = join(dir, 'bags.kdve');
    writeBags(
      exportImageBags({ manifestPath, tileIndexPath, encoder, instances: 'tokens', batchSize: 8 }),
      bagsPath,
    );
    const out = python(
      `
import numpy as np
from plexkit.embeddings import read_bags
bags = read_bags(${JSON.stringify(bagsPath)}, expect_dim=512)
assert len(bags) == 2, len(bags)
assert [b.tile_ref for b in bags] == ["s1:0:0", "s1:112:112"]
assert [b.label for b in bags] == [1, 0]
for b in bags:
    assert b.instances.shape == (49, 512)
    norms = np.linalg.norm(b.instances, axis=1)
    assert np.abs(norms - 1.0).max() < 1e-5, norms
print("tile-bags-ok")
`,
    );
    expect(out).toContain('tile-bags-ok');
  });

  it('exported prompts form a valid concept set', () => {
    const dir = mkdtempSync(join(tmpdir(), 'interop-'));
    const promptPath = join(dir, 'prompts.txt');
    writeFileSync(promptPath, SIX_PROMPTS);
    const conceptsPath = join(dir, 'concepts.kdve');
    writeBags(exportPrompts({ promptPath, encoder }), conceptsPath);
    const out = python(
      `
import numpy as np
from plexkit.embeddings import load_concepts
concepts = load_concepts(${JSON.stringify(conceptsPath)}, expect_dim=512)
assert concepts.dim == 512
assert concepts.n_instance_concepts == 4
assert concepts.instance_classes == [1, 1, 0, 0]
assert np.abs(np.linalg.norm(concepts.class_prompts, axis=1) - 1).max() < 1e-5
print("concepts-ok")
`,
    );
    expect(out).toContain('concepts-ok');
  });

  it('exported artifacts drive the classifier head end to end', () => {
    const dir = mkdtempSync(join(tmpdir(), 'interop-'));
    const { manifestPath, tileIndexPath } = writeFixture(dir, [{ x: 0, y: 0, label: 'plexus' }]);
    const bagsPath = join(dir, 'bags.kdve');
    writeBags(
      exportImageBags({ manifestPath, tileIndexPath, encoder, instances: 'tokens', batchSize: 8 }),
      bagsPath,
    );
    const promptPath = join(dir, 'prompts.txt');
    writeFileSync(promptPath, SIX_PROMPTS);
    const conceptsPath = join(dir, 'concepts.kdve');
    writeBags(exportPrompts({ promptPath, encoder }), conceptsPath);
    const out = python(
      `
import numpy as np
from plexkit.embeddings import load_concepts, read_bags
from plexkit.head import HeadConfig, forward, init_params
concepts = load_concepts(${JSON.stringify(conceptsPath)}, expect_dim=512)
bag = read_bags(${JSON.stringify(bagsPath)}, expect_dim=512)[0]
params = init_params(concepts, HeadConfig(dim=512), seed=0)
trace = forward(bag, concepts, params)
assert abs(trace.probs.sum() - 1.0) < 1e-9
assert np.all(np.isfinite(trace.logits))
assert trace.instance_weights.shape == (concepts.n_instance_concepts + 8, 49)
print("forward-ok", trace.probs)
`,
    );
    expect(out).toContain('forward-ok');
  });

  it('re-export of identical inputs is bitwise-stable on disk', () => {
    const dir = mkdtempSync(join(tmpdir(), 'interop-'));
    const promptPath = join(dir, 'prompts.txt');
    writeFileSync(promptPath, SIX_PROMPTS);
    const a = join(dir, 'a.kdve');
    const b = join(dir, 'b.kdve');
    writeBags(exportPrompts({ promptPath, encoder }), a);
    writeBags(exportPrompts({ promptPath, encoder }), b);
    const diff = python(
      `
from pathlib import Path
print("identical" if Path(${JSON.stringify(a)}).read_bytes() == Path(${JSON.stringify(
        b,
      )}).read_bytes() else "different")
`,
    );
    expect(diff).toContain('identical');
  });
});
