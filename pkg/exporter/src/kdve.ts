/** KDVE binary format: byte-compatible with the consuming pipeline.
 *
 * Layout: magic "KDVE", u32 version, u32 dim, u32 bag count; per bag a
 * u16-length UTF-8 id, u8 label, u32 instance count, then row-major
 * little-endian float32 instances.
 */
import { readFileSync, writeFileSync } from 'node:fs';

export const KDVE_MAGIC = 'KDVE';
export const KDVE_VERSION = 1;

export interface Bag {
  id: string;
  label: 0 | 1;
  /** n rows of dim floats, row-major. */
  instances: Float32Array;
  n: number;
  dim: number;
}

export function makeBag(id: string, label: 0 | 1, rows: Float64Array[], dim: number): Bag {
  const instances = new Float32Array(rows.length * dim);
  rows.forEach((row, i) => {
    if (row.length !== dim) {
      throw new Error(`bag ${id}: row has dim ${row.length}, expected ${dim}`);
    }
    instances.set(Float32Array.from(row), i * dim);
  });
  return { id, label, instances, n: rows.length, dim };
}

export function encodeBags(bags: Bag[]): Buffer {
  const dim = bags.length > 0 ? bags[0].dim : 0;
  const parts: Buffer[] = [];
  const header = Buffer.alloc(16);
  header.write(KDVE_MAGIC, 0, 'ascii');
  header.writeUInt32LE(KDVE_VERSION, 4);
  header.writeUInt32LE(dim, 8);
  header.writeUInt32LE(bags.length, 12);
  parts.push(header);
  for (const bag of bags) {
    if (bag.dim !== dim) {
      throw new Error(`bag ${bag.id}: dim ${bag.dim} != file dim ${dim}`);
    }
    const idBytes = Buffer.from(bag.id, 'utf-8');
    const head = Buffer.alloc(2 + idBytes.length + 5);
    head.writeUInt16LE(idBytes.length, 0);
    idBytes.copy(head, 2);
    head.writeUInt8(bag.label, 2 + idBytes.length);
    head.writeUInt32LE(bag.n, 3 + idBytes.length);
    parts.push(head);
    const payload = Buffer.alloc(bag.instances.length * 4);
    for (let i = 0; i < bag.instances.length; i++) {
      payload.writeFloatLE(bag.instances[i], i * 4);
    }
    parts.push(payload);
  }
  return Buffer.concat(parts);
}

export function writeBags(bags: Bag[], path: string): void {
  writeFileSync(path, encodeBags(bags));
}

export function readBags(path: string): Bag[] {
  const raw = readFileSync(path);
  if (raw.length < 16 || raw.toString('ascii', 0, 4) !== KDVE_MAGIC) {
    throw new Error(`${path}: not a KDVE file`);
  }
  const version = raw.readUInt32LE(4);
  if (version !== KDVE_VERSION) {
    throw new Error(`${path}: unsupported version ${version}`);
  }
  const dim = raw.readUInt32LE(8);
  const count = raw.readUInt32LE(12);
  const bags: Bag[] = [];
  let offset = 16;
  for (let i = 0; i < count; i++) {
    const idLen = raw.readUInt16LE(offset);
    offset += 2;
    const id = raw.toString('utf-8', offset, offset + idLen);
    offset += idLen;
    const label = raw.readUInt8(offset) as 0 | 1;
    offset += 1;
    const n = raw.readUInt32LE(offset);
    offset += 4;
    const instances = new Float32Array(n * dim);
    for (let j = 0; j < n * dim; j++) {
      instances[j] = raw.readFloatLE(offset + j * 4);
    }
    offset += n * dim * 4;
    bags.push({ id, label, instances, n, dim });
  }
  if (offset !== raw.length) {
    throw new Error(`${path}: ${raw.length - offset} trailing bytes`);
  }
  return bags;
}
