/**
 * Batch export: run every dataset image (clean, corrupted and attacked)
 * through the toy network, capture activations at native layer resolution,
 * and write records, prediction stacks, label maps and a manifest that the
 * detection pipeline consumes verbatim.
 *
 * Clean records go to the train split except for a trailing holdout
 * fraction, which joins the test split as negatives; every perturbed or
 * attacked record lands in the test split.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';

import {
  CLEAN,
  TEST,
  TRAIN,
  Manifest,
  ManifestEntry,
  writeManifest,
  writeRecord,
} from './container.js';
import { AttackConfig, defaultAttack, fgsmAttack } from './attack.js';
import { CapturedActivations, HookConfig, ToyModel, captureActivations, selectLayers } from './model.js';
import { Image, PerturbationKind, applyPerturbation } from './perturb.js';

export interface DatasetItem {
  id: string;
  image: Image;
}

export interface ExportOptions {
  perturbations?: PerturbationKind[];
  attacks?: AttackConfig[];
  /** trailing fraction of clean records assigned to the test split */
  holdout?: number;
}

function recordPath(id: string, perturbation: string): string {
  return `${id}_${perturbation}.daac`;
}

function writeActivationFiles(
  dir: string,
  id: string,
  perturbation: string,
  captured: CapturedActivations,
): void {
  writeRecord(
    { inputId: id, perturbation, layers: captured.layers },
    path.join(dir, recordPath(id, perturbation)),
  );
  const hw = captured.labels.length;
  const c = captured.softmax.length / hw;
  const [h, w] = [
    captured.layers[0].h, // all toy layers share the input resolution
    captured.layers[0].w,
  ];
  writeRecord(
    {
      inputId: id,
      perturbation,
      layers: [{ name: 'pass0', c, h, w, values: captured.softmax }],
      extra: { kind: 'prediction' },
    },
    path.join(dir, `pred_${recordPath(id, perturbation)}`),
  );
  writeRecord(
    {
      inputId: id,
      perturbation,
      layers: [{ name: 'labels', c: 1, h, w, values: captured.labels }],
      extra: { kind: 'labels' },
    },
    path.join(dir, `labels_${recordPath(id, perturbation)}`),
  );
}

export function exportActivations(
  dataset: DatasetItem[],
  toy: ToyModel,
  hook: HookConfig,
  outDir: string,
  opts: ExportOptions = {},
): Manifest {
  selectLayers(toy.layerNames, hook.layerSelection); // fail fast on empty selection
  fs.mkdirSync(outDir, { recursive: true });

  const holdout = opts.holdout ?? 0.25;
  const nTest = Math.floor(dataset.length * holdout);
  const entries: ManifestEntry[] = [];
  let channels = 0;

  dataset.forEach((item, index) => {
    const variants: { perturbation: string; image: Image }[] = [
      { perturbation: CLEAN, image: item.image },
    ];
    for (const kind of opts.perturbations ?? []) {
      variants.push({ perturbation: kind, image: applyPerturbation(item.image, kind) });
    }
    for (const attack of opts.attacks ?? []) {
      variants.push({
        perturbation: attack.kind,
        image: fgsmAttack(toy, item.image, attack),
      });
    }
    for (const variant of variants) {
      const captured = captureActivations(toy, variant.image.data, hook.layerSelection);
      channels = captured.layers.reduce((acc, l) => acc + l.c, 0);
      writeActivationFiles(outDir, item.id, variant.perturbation, captured);
      const clean = variant.perturbation === CLEAN;
      entries.push({
        path: recordPath(item.id, variant.perturbation),
        input_id: item.id,
        perturbation: variant.perturbation,
        split: clean && index < dataset.length - nTest ? TRAIN : TEST,
      });
    }
  });

  const manifest: Manifest = {
    volume_dims: [hook.height, hook.width, channels],
    layer_selection: hook.layerSelection,
    records: entries,
  };
  writeManifest(manifest, outDir);
  return manifest;
}

export { defaultAttack };
