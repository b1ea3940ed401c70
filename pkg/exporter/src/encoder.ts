/** Frozen encoders producing joint-space embeddings.
 *
 * The built-in encoder is a deterministic stand-in for a pretrained
 * vision-language checkpoint: a fixed seeded random projection over patch
 * statistics on the image side and seeded token vectors on the text side.
 * It has no semantics, but it is frozen, fast, and dimension-correct, so
 * every downstream format and pipeline contract can be exercised offline.
 * A real checkpoint slots in behind the same interface.
 */
import { fnv1a, gaussianArray } from './rng.js';

export type InstanceMode = 'tokens' | 'subtiles' | 'pooled';

export interface RgbTile {
  width: number;
  height: number;
  /** RGB triples, row-major. */
  data: Uint8Array;
}

export class PromptTooLong extends Error {}
export class ModelDimMismatch extends Error {}
export class UnreadableTile extends Error {}

export interface Encoder {
  readonly name: string;
  readonly dim: number;
  /** Token window of the text side. */
  readonly contextLength: number;
  encodeImage(tile: RgbTile, mode: InstanceMode): Float64Array[];
  encodeText(text: string): Float64Array;
}

export const TILE_SIZE = 224;
export const TOKEN_GRID = 7; // 7x7 spatial tokens, patch size 32
export const SUBTILE_GRID = 3; // 3x3 half-overlapping 112px crops
export const TEXT_WINDOW = 77;

const FROZEN_SEED = 0x1f2e3d4c;
const BLOCK_GRID = 8; // patch statistics: 8x8 per-channel block means
const FEATURE_DIM = BLOCK_GRID * BLOCK_GRID * 3 + 3 + 1; // + channel means + bias

function unitNormalize(v: Float64Array): Float64Array {
  let sum = 0;
  for (const x of v) sum += x * x;
  const norm = Math.sqrt(sum);
  if (norm <= 1e-12) throw new Error('zero-norm embedding');
  for (let i = 0; i < v.length; i++) v[i] /= norm;
  return v;
}

/** Per-channel block means of a square region, centered within the region,
 * plus the channel means and a bias term. */
function regionFeature(tile: RgbTile, x0: number, y0: number, size: number): Float64Array {
  const block = size / BLOCK_GRID;
  const feat = new Float64Array(FEATURE_DIM);
  const channelMean = [0, 0, 0];
  for (let by = 0; by < BLOCK_GRID; by++) {
    for (let bx = 0; bx < BLOCK_GRID; bx++) {
      const sums = [0, 0, 0];
      for (let y = 0; y < block; y++) {
        for (let x = 0; x < block; x++) {
          const px = x0 + bx * block + x;
          const py = y0 + by * block + y;
          const base = (py * tile.width + px) * 3;
          sums[0] += tile.data[base];
          sums[1] += tile.data[base + 1];
          sums[2] += tile.data[base + 2];
        }
      }
      const area = block * block;
      const idx = (by * BLOCK_GRID + bx) * 3;
      for (let c = 0; c < 3; c++) {
        feat[idx + c] = sums[c] / area;
        channelMean[c] += sums[c] / area;
      }
    }
  }
  const nBlocks = BLOCK_GRID * BLOCK_GRID;
  for (let c = 0; c < 3; c++) channelMean[c] /= nBlocks;
  for (let b = 0; b < nBlocks; b++) {
    for (let c = 0; c < 3; c++) {
      feat[b * 3 + c] = (feat[b * 3 + c] - channelMean[c]) / 64.0;
    }
  }
  const tail = nBlocks * 3;
  for (let c = 0; c < 3; c++) {
    feat[tail + c] = (channelMean[c] - 127.5) / 127.5;
  }
  feat[tail + 3] = 1.0; // keeps uniform regions off the zero vector
  return feat;
}

export class BuiltinEncoder implements Encoder {
  readonly name: string;
  readonly dim: number;
  readonly contextLength = TEXT_WINDOW;
  private projection: Float64Array | null = null;
  private tokenCache = new Map<string, Float64Array>();

  constructor(dim: number) {
    if (dim < 4) throw new Error(`builtin encoder dim ${dim} too small`);
    this.dim = dim;
    this.name = `builtin-${dim}`;
  }

  private getProjection(): Float64Array {
    if (this.projection === null) {
      this.projection = gaussianArray(FROZEN_SEED ^ this.dim, this.dim * FEATURE_DIM);
    }
    return this.projection;
  }

  private project(feat: Float64Array): Float64Array {
    const w = this.getProjection();
    const out = new Float64Array(this.dim);
    for (let d = 0; d < this.dim; d++) {
      let acc = 0;
      const row = d * FEATURE_DIM;
      for (let f = 0; f < FEATURE_DIM; f++) {
        acc += w[row + f] * feat[f];
      }
      out[d] = acc;
    }
    return unitNormalize(out);
  }

  encodeImage(tile: RgbTile, mode: InstanceMode): Float64Array[] {
    if (tile.width !== TILE_SIZE || tile.height !== TILE_SIZE) {
      throw new UnreadableTile(
        `tile must be ${TILE_SIZE}x${TILE_SIZE}, got ${tile.width}x${tile.height}`,
      );
    }
    if (mode === 'subtiles') {
      // 112px crops at half-overlap: origins {0, 56, 112} on both axes
      const rows: Float64Array[] = [];
      for (let gy = 0; gy < SUBTILE_GRID; gy++) {
        for (let gx = 0; gx < SUBTILE_GRID; gx++) {
          rows.push(this.project(regionFeature(tile, gx * 56, gy * 56, 112)));
        }
      }
      return rows;
    }
    const tokens: Float64Array[] = [];
    const patch = TILE_SIZE / TOKEN_GRID;
    for (let gy = 0; gy < TOKEN_GRID; gy++) {
      for (let gx = 0; gx < TOKEN_GRID; gx++) {
        tokens.push(this.project(regionFeature(tile, gx * patch, gy * patch, patch)));
      }
    }
    if (mode === 'tokens') return tokens;
    // pooled: mean token, re-normalized
    const pooled = new Float64Array(this.dim);
    for (const token of tokens) {
      for (let d = 0; d < this.dim; d++) pooled[d] += token[d];
    }
    for (let d = 0; d < this.dim; d++) pooled[d] /= tokens.length;
    return [unitNormalize(pooled)];
  }

  private tokenVector(token: string): Float64Array {
    let cached = this.tokenCache.get(token);
    if (!cached) {
      cached = gaussianArray(fnv1a(`tok:${token}`) ^ this.dim, this.dim);
      this.tokenCache.set(token, cached);
    }
    return cached;
  }

  encodeText(text: string): Float64Array {
    let tokens = text.toLowerCase().split(/[^a-z0-9]+/).filter(Boolean);
    if (tokens.length > this.contextLength) {
      throw new PromptTooLong(
        `prompt has ${tokens.length} tokens, window is ${this.contextLength}`,
      );
    }
    if (tokens.length === 0) tokens = [text || 'empty'];
    const out = new Float64Array(this.dim);
    tokens.forEach((token, i) => {
      const vec = this.tokenVector(token);
      const weight = 1.0 / (1.0 + 0.05 * i); // mild order sensitivity
      for (let d = 0; d < this.dim; d++) out[d] += weight * vec[d];
    });
    return unitNormalize(out);
  }
}

export const DEFAULT_MODEL = 'builtin-512';

export function loadEncoder(model: string): Encoder {
  const builtin = /^builtin-(\d+)$/.exec(model);
  if (builtin) return new BuiltinEncoder(parseInt(builtin[1], 10));
  throw new Error(
    `model '${model}' is not available: this environment has no pretrained ` +
      `checkpoints; use '${DEFAULT_MODEL}' or plug a checkpoint-backed encoder ` +
      `into the Encoder interface`,
  );
}

/** Guard the declared embedding width against the encoder's actual width. */
export function checkDim(encoder: Encoder, expected: number | undefined): void {
  if (expected !== undefined && expected !== encoder.dim) {
    throw new ModelDimMismatch(
      `encoder ${encoder.name} emits dim ${encoder.dim}, job declares ${expected}`,
    );
  }
}
