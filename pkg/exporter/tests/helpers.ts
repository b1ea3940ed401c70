import { writeFileSync } from 'node:fs';
import { join } from 'node:path';
import { PNG } from 'pngjs';

import { mulberry32 } from '../src/rng.js';

// two instance descriptors per class plus one bag-level prompt per class
export const SIX_PROMPTS =
  'plexus\tinstance\tclusters of large neuronal cell bodies with visible nucleoli\n' +
  'plexus\tinstance\tfine wavy fibrous mesh between muscle layers\n' +
  'no_plexus\tinstance\tuniform smooth muscle bundles without neural elements\n' +
  'no_plexus\tinstance\tdense collagenous stroma lacking cell clusters\n' +
  'plexus\tbag\tan image of a myenteric plexus region\n' +
  'no_plexus\tbag\tan image of muscularis tissue without plexus\n';

export function writeSlidePng(
  dir: string,
  name: string,
  width: number,
  height: number,
  seed = 0,
  constant?: [number, number, number],
): string {
  const png = new PNG({ width, height });
  const next = mulberry32(seed);
  for (let i = 0; i < width * height; i++) {
    if (constant) {
      png.data[i * 4] = constant[0];
      png.data[i * 4 + 1] = constant[1];
      png.data[i * 4 + 2] = constant[2];
    } else {
      png.data[i * 4] = Math.floor(next() * 256);
      png.data[i * 4 + 1] = Math.floor(next() * 256);
      png.data[i * 4 + 2] = Math.floor(next() * 256);
    }
    png.data[i * 4 + 3] = 255;
  }
  const path = join(dir, name);
  writeFileSync(path, PNG.sync.write(png));
  return path;
}

export function writeFixture(
  dir: string,
  tiles: { x: number; y: number; label: string }[],
): { manifestPath: string; tileIndexPath: string; slidePath: string } {
  const slidePath = writeSlidePng(dir, 's1.png', 448, 448, 7);
  const manifestPath = join(dir, 'manifest.json');
  writeFileSync(
    manifestPath,
    JSON.stringify({
      slides: [{ slide_id: 's1', image: slidePath, mask: slidePath, magnification: 5.0 }],
    }),
  );
  const tileIndexPath = join(dir, 'tiles.jsonl');
  writeFileSync(
    tileIndexPath,
    tiles
      .map((t) =>
        JSON.stringify({ slide_id: 's1', x: t.x, y: t.y, size: 224, label: t.label }),
      )
      .join('\n') + '\n',
  );
  return { manifestPath, tileIndexPath, slidePath };
}
