import { mkdtempSync, writeFileSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';
import { describe, expect, it } from 'vitest';

import { encodeBags, makeBag, readBags, writeBags } from '../src/kdve.js';

function tempDir(): string {
  return mkdtempSync(join(tmpdir(), 'kdve-'));
}

describe('KDVE encoding', () => {
  it('produces the exact documented byte layout', () => {
    const row = new Float64Array([1.0, -2.5]);
    const bag = makeBag('ab', 1, [row], 2);
    const encoded = encodeBags([bag]);

    const expected = Buffer.alloc(16 + 2 + 2 + 5 + 8);
    expected.write('KDVE', 0, 'ascii');
    expected.writeUInt32LE(1, 4); // version
    expected.writeUInt32LE(2, 8); // dim
    expected.writeUInt32LE(1, 12); // bag count
    expected.writeUInt16LE(2, 16); // id length
    expected.write('ab', 18, 'utf-8');
    expected.writeUInt8(1, 20); // label
    expected.writeUInt32LE(1, 21); // instance count
    expected.writeFloatLE(1.0, 25);
    expected.writeFloatLE(-2.5, 29);

    expect(encoded.equals(expected)).toBe(true);
  });

  it('round-trips bags through a file', () => {
    const dir = tempDir();
    const path = join(dir, 'bags.kdve');
    const bags = [
      makeBag('s:0:0', 0, [new Float64Array([0.25, 0.5, 0.75])], 3),
      makeBag('s:112:0', 1, [new Float64Array([1, 2, 3]), new Float64Array([4, 5, 6])], 3),
    ];
    writeBags(bags, path);
    const loaded = readBags(path);
    expect(loaded).toHaveLength(2);
    expect(loaded[0].id).toBe('s:0:0');
    expect(loaded[1].label).toBe(1);
    expect(loaded[1].n).toBe(2);
    expect(Array.from(loaded[1].instances)).toEqual([1, 2, 3, 4, 5, 6]);
  });

  it('accepts an empty bag list', () => {
    const dir = tempDir();
    const path = join(dir, 'empty.kdve');
    writeBags([], path);
    expect(readBags(path)).toEqual([]);
  });

  it('rejects mixed dimensions', () => {
    const a = makeBag('a', 0, [new Float64Array([1, 2])], 2);
    const b = makeBag('b', 0, [new Float64Array([1, 2, 3])], 3);
    expect(() => encodeBags([a, b])).toThrow(/dim/);
  });

  it('rejects trailing bytes', () => {
    const dir = tempDir();
    const path = join(dir, 'bad.kdve');
    const bytes = encodeBags([makeBag('a', 0, [new Float64Array([1, 2])], 2)]);
    writeFileSync(path, Buffer.concat([bytes, Buffer.from([0])]));
    expect(() => readBags(path)).toThrow(/trailing/);
  });
});
