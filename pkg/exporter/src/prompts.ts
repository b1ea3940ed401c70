/** Concept-prompt export: class/level/text lines in, one embedding row out. */
import { readFileSync } from 'node:fs';

import { Encoder } from './encoder.js';
import { Bag, makeBag } from './kdve.js';

export type ConceptLevel = 'instance' | 'bag';

export interface PromptLine {
  classValue: 0 | 1;
  level: ConceptLevel;
  text: string;
}

const CLASS_VALUES: Record<string, 0 | 1> = { no_plexus: 0, plexus: 1 };

export function parsePromptFile(path: string): PromptLine[] {
  const lines: PromptLine[] = [];
  readFileSync(path, 'utf-8')
    .split('\n')
    .forEach((raw, idx) => {
      const line = raw.trim();
      if (!line || line.startsWith('#')) return;
      const parts = line.split('\t');
      if (parts.length !== 3) {
        throw new Error(`${path}:${idx + 1}: expected class<TAB>level<TAB>text`);
      }
      const [className, level, text] = parts;
      const classValue = CLASS_VALUES[className];
      if (classValue === undefined) {
        throw new Error(`${path}:${idx + 1}: unknown class '${className}'`);
      }
      if (level !== 'instance' && level !== 'bag') {
        throw new Error(`${path}:${idx + 1}: unknown level '${level}'`);
      }
      lines.push({ classValue, level, text });
    });
  return lines;
}

const CLASS_NAMES = ['no_plexus', 'plexus'] as const;

export interface PromptExportJob {
  promptPath: string;
  encoder: Encoder;
}

/** One single-row bag per prompt line. The bag id is the full
 * class/level/text line so concept files are self-describing. */
export function exportPrompts(job: PromptExportJob): Bag[] {
  return parsePromptFile(job.promptPath).map((line) => {
    const row = job.encoder.encodeText(line.text);
    const id = `${CLASS_NAMES[line.classValue]}\t${line.level}\t${line.text}`;
    return makeBag(id, line.classValue, [row], job.encoder.dim);
  });
}
