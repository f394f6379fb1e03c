/**
 * Toy per-pixel segmentation network used as the monitored model.
 *
 * Two 3x3 same-padded conv layers (relu then linear logits) followed by a
 * per-pixel softmax. Weights are drawn from a seeded generator so every
 * process builds bit-identical models; there is no training here, the
 * network only has to produce structured, input-dependent activations.
 */

import * as tf from '@tensorflow/tfjs';

export interface HookConfig {
  /** tag following the manifest conventions of the consuming pipeline */
  layerSelection: 'everywhere' | 'conv_outputs' | 'before_batchnorm';
  height: number;
  width: number;
}

export interface ToyModel {
  model: tf.LayersModel;
  /** emits [conv1, logits, softmax] for one (1,h,w,3) input */
  traced: tf.LayersModel;
  nClasses: number;
  height: number;
  width: number;
  layerNames: string[];
}

/** mulberry32: tiny deterministic PRNG, uniform in [0, 1) */
export function seededUniform(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function gaussianArray(n: number, std: number, rand: () => number): Float32Array {
  const out = new Float32Array(n);
  for (let i = 0; i < n; i += 2) {
    // Box-Muller from two uniforms
    const u = Math.max(rand(), 1e-12);
    const v = rand();
    const r = Math.sqrt(-2 * Math.log(u));
    out[i] = std * r * Math.cos(2 * Math.PI * v);
    if (i + 1 < n) out[i + 1] = std * r * Math.sin(2 * Math.PI * v);
  }
  return out;
}

export function buildToyModel(opts: {
  height: number;
  width: number;
  nClasses?: number;
  seed?: number;
  zeroWeights?: boolean;
}): ToyModel {
  const { height, width } = opts;
  const nClasses = opts.nClasses ?? 3;
  const seed = opts.seed ?? 1234;

  const input = tf.input({ shape: [height, width, 3] });
  const conv1Layer = tf.layers.conv2d({
    filters: 8,
    kernelSize: 3,
    padding: 'same',
    activation: 'relu',
    name: 'conv1',
  });
  const conv2Layer = tf.layers.conv2d({
    filters: nClasses,
    kernelSize: 3,
    padding: 'same',
    name: 'conv2_logits',
  });
  const softmaxLayer = tf.layers.softmax({ axis: -1, name: 'pixel_softmax' });

  const conv1 = conv1Layer.apply(input) as tf.SymbolicTensor;
  const logits = conv2Layer.apply(conv1) as tf.SymbolicTensor;
  const probs = softmaxLayer.apply(logits) as tf.SymbolicTensor;

  const model = tf.model({ inputs: input, outputs: probs });
  const traced = tf.model({ inputs: input, outputs: [conv1, logits, probs] });

  const rand = seededUniform(seed);
  const setConv = (layer: tf.layers.Layer, inC: number, outC: number) => {
    const kn = 3 * 3 * inC * outC;
    const kernel = opts.zeroWeights
      ? new Float32Array(kn)
      : gaussianArray(kn, 1 / Math.sqrt(9 * inC), rand);
    const bias = opts.zeroWeights ? new Float32Array(outC) : gaussianArray(outC, 0.1, rand);
    layer.setWeights([tf.tensor4d(kernel, [3, 3, inC, outC]), tf.tensor1d(bias)]);
  };
  setConv(conv1Layer, 3, 8);
  setConv(conv2Layer, 8, nClasses);

  return {
    model,
    traced,
    nClasses,
    height,
    width,
    layerNames: ['conv1', 'conv2_logits'],
  };
}

export interface CapturedActivations {
  /** per layer: channel-major (c, h, w) float32 values */
  layers: { name: string; c: number; h: number; w: number; values: Float32Array }[];
  /** (nClasses, h, w) per-pixel softmax */
  softmax: Float32Array;
  /** (h, w) argmax class ids */
  labels: Float32Array;
}

/** NHWC tensor data for one image to channel-major (c, h, w). */
export function hwcToChw(data: Float32Array, h: number, w: number, c: number): Float32Array {
  const out = new Float32Array(c * h * w);
  for (let ch = 0; ch < c; ch++) {
    for (let y = 0; y < h; y++) {
      for (let x = 0; x < w; x++) {
        out[ch * h * w + y * w + x] = data[(y * w + x) * c + ch];
      }
    }
  }
  return out;
}

export function captureActivations(
  toy: ToyModel,
  imageHwc: Float32Array,
  selection: HookConfig['layerSelection'] = 'everywhere',
): CapturedActivations {
  const selected = selectLayers(toy.layerNames, selection);
  return tf.tidy(() => {
    const x = tf.tensor4d(imageHwc, [1, toy.height, toy.width, 3]);
    const [conv1, logits, probs] = toy.traced.predict(x) as tf.Tensor[];
    const byName: Record<string, tf.Tensor> = { conv1, conv2_logits: logits };
    const layers = selected.map((name) => {
      const t = byName[name];
      const [, h, w, c] = t.shape as [number, number, number, number];
      return { name, c, h, w, values: hwcToChw(t.dataSync() as Float32Array, h, w, c) };
    });
    const [, h, w, c] = probs.shape as [number, number, number, number];
    const softmax = hwcToChw(probs.dataSync() as Float32Array, h, w, c);
    const labels = new Float32Array(h * w);
    for (let p = 0; p < h * w; p++) {
      let best = 0;
      for (let ch = 1; ch < c; ch++) {
        if (softmax[ch * h * w + p] > softmax[best * h * w + p]) best = ch;
      }
      labels[p] = best;
    }
    return { layers, softmax, labels };
  });
}

export function selectLayers(names: string[], selection: HookConfig['layerSelection']): string[] {
  let out: string[];
  switch (selection) {
    case 'everywhere':
      out = [...names];
      break;
    case 'conv_outputs':
      out = names.filter((n) => n.includes('conv'));
      break;
    case 'before_batchnorm':
      out = names.filter((n) => n.includes('pre_bn'));
      break;
    default:
      throw new Error(`unknown layer selection ${selection}`);
  }
  if (out.length === 0) {
    throw new Error(`layer selection ${selection} matches no layer of this model`);
  }
  return out;
}
