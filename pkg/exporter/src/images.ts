/** Tile-image export: manifest + tile index in, one embedding bag per tile out. */
import { readFileSync } from 'node:fs';
import { PNG } from 'pngjs';

import { Encoder, InstanceMode, RgbTile, TILE_SIZE, UnreadableTile } from './encoder.js';
import { Bag, makeBag } from './kdve.js';

export interface SlideEntry {
  slideId: string;
  imagePath: string;
  maskPath: string;
  magnification: number;
}

export interface TileRecord {
  slideId: string;
  x: number;
  y: number;
  size: number;
  label: 0 | 1;
}

export function readManifest(path: string): SlideEntry[] {
  const doc = JSON.parse(readFileSync(path, 'utf-8'));
  return doc.slides.map((row: any) => ({
    slideId: row.slide_id,
    imagePath: row.image,
    maskPath: row.mask,
    magnification: row.magnification ?? 5.0,
  }));
}

const LABEL_VALUES: Record<string, 0 | 1> = { no_plexus: 0, plexus: 1 };

export function readTileIndex(path: string): TileRecord[] {
  const tiles: TileRecord[] = [];
  for (const line of readFileSync(path, 'utf-8').split('\n')) {
    const trimmed = line.trim();
    if (!trimmed) continue;
    const doc = JSON.parse(trimmed);
    const label = LABEL_VALUES[doc.label];
    if (label === undefined) throw new Error(`unknown tile label '${doc.label}'`);
    tiles.push({ slideId: doc.slide_id, x: doc.x, y: doc.y, size: doc.size, label });
  }
  return tiles;
}

export interface SlideImage {
  width: number;
  height: number;
  /** RGBA from the PNG decoder. */
  data: Uint8Array;
}

export function loadSlide(path: string): SlideImage {
  let png: PNG;
  try {
    png = PNG.sync.read(readFileSync(path));
  } catch (err) {
    throw new UnreadableTile(`cannot read slide ${path}: ${(err as Error).message}`);
  }
  return { width: png.width, height: png.height, data: png.data };
}

export function cropTile(slide: SlideImage, tile: TileRecord): RgbTile {
  if (tile.size !== TILE_SIZE) {
    throw new UnreadableTile(`tile size ${tile.size} unsupported, expected ${TILE_SIZE}`);
  }
  if (tile.x < 0 || tile.y < 0 || tile.x + tile.size > slide.width || tile.y + tile.size > slide.height) {
    throw new UnreadableTile(
      `tile (${tile.x}, ${tile.y}, ${tile.size}) outside ${slide.width}x${slide.height} slide`,
    );
  }
  const data = new Uint8Array(tile.size * tile.size * 3);
  for (let y = 0; y < tile.size; y++) {
    for (let x = 0; x < tile.size; x++) {
      const src = ((tile.y + y) * slide.width + tile.x + x) * 4;
      const dst = (y * tile.size + x) * 3;
      data[dst] = slide.data[src];
      data[dst + 1] = slide.data[src + 1];
      data[dst + 2] = slide.data[src + 2];
    }
  }
  return { width: tile.size, height: tile.size, data };
}

export interface ImageExportJob {
  manifestPath: string;
  tileIndexPath: string;
  encoder: Encoder;
  instances: InstanceMode;
  batchSize: number;
}

/** One bag per tile-index row, in index order; ids follow slide:x:y. */
export function exportImageBags(job: ImageExportJob): Bag[] {
  const slides = new Map(readManifest(job.manifestPath).map((s) => [s.slideId, s]));
  const tiles = readTileIndex(job.tileIndexPath);
  const cache = new Map<string, SlideImage>();
  const bags: Bag[] = [];
  for (let start = 0; start < tiles.length; start += job.batchSize) {
    for (const tile of tiles.slice(start, start + job.batchSize)) {
      const entry = slides.get(tile.slideId);
      if (!entry) {
        throw new UnreadableTile(`tile references unknown slide '${tile.slideId}'`);
      }
      let slide = cache.get(tile.slideId);
      if (!slide) {
        slide = loadSlide(entry.imagePath);
        cache.set(tile.slideId, slide);
      }
      const rows = job.encoder.encodeImage(cropTile(slide, tile), job.instances);
      bags.push(
        makeBag(`${tile.slideId}:${tile.x}:${tile.y}`, tile.label, rows, job.encoder.dim),
      );
    }
  }
  return bags;
}
