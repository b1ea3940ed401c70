/** Deterministic seeded randomness for the frozen built-in encoder. */

/** FNV-1a 32-bit hash of a UTF-8 string. */
export function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  const bytes = Buffer.from(text, 'utf-8');
  for (const byte of bytes) {
    hash ^= byte;
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash >>> 0;
}

/** mulberry32: fast 32-bit PRNG with uniform [0, 1) output. */
export function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

/** Standard-normal draws via Box-Muller over mulberry32. */
export function gaussianArray(seed: number, count: number): Float64Array {
  const next = mulberry32(seed);
  const out = new Float64Array(count);
  for (let i = 0; i < count; i += 2) {
    let u = next();
    while (u <= 1e-12) u = next();
    const v = next();
    const radius = Math.sqrt(-2.0 * Math.log(u));
    out[i] = radius * Math.cos(2.0 * Math.PI * v);
    if (i + 1 < count) out[i + 1] = radius * Math.sin(2.0 * Math.PI * v);
  }
  return out;
}
