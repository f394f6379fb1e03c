/**
 * Image corruptions applied before export.
 *
 * Images are interleaved RGB Float32Arrays in [0, 1]. vertical_flip is an
 * exact row reversal (bit-exact involution); fog, frost and color_jitter
 * are procedural approximations of the usual corruption benchmarks, each
 * deterministic for a given seed, and always clipped back into [0, 1].
 */

import { seededUniform } from './model.js';

export type PerturbationKind = 'vertical_flip' | 'fog' | 'frost' | 'color_jitter';

export const PERTURBATIONS: PerturbationKind[] = ['vertical_flip', 'fog', 'frost', 'color_jitter'];

export interface Image {
  h: number;
  w: number;
  /** h*w*3 interleaved RGB in [0, 1] */
  data: Float32Array;
}

function clip01(v: number): number {
  return v < 0 ? 0 : v > 1 ? 1 : v;
}

export function verticalFlip(img: Image): Image {
  const { h, w } = img;
  const out = new Float32Array(img.data.length);
  const rowLen = w * 3;
  for (let y = 0; y < h; y++) {
    out.set(img.data.subarray(y * rowLen, (y + 1) * rowLen), (h - 1 - y) * rowLen);
  }
  return { h, w, data: out };
}

/**
 * Smooth multi-octave value noise in [0, 1], the basis for fog and frost.
 */
function noiseField(h: number, w: number, seed: number, octaves: number): Float32Array {
  const field = new Float32Array(h * w);
  let amplitude = 1.0;
  let total = 0.0;
  for (let oct = 0; oct < octaves; oct++) {
    const cells = 2 << oct; // lattice resolution doubles per octave
    const rand = seededUniform(seed * 1013 + oct);
    const lattice = new Float32Array((cells + 1) * (cells + 1));
    for (let i = 0; i < lattice.length; i++) lattice[i] = rand();
    for (let y = 0; y < h; y++) {
      const fy = (y / h) * cells;
      const y0 = Math.floor(fy);
      const ty = fy - y0;
      for (let x = 0; x < w; x++) {
        const fx = (x / w) * cells;
        const x0 = Math.floor(fx);
        const tx = fx - x0;
        const i00 = lattice[y0 * (cells + 1) + x0];
        const i01 = lattice[y0 * (cells + 1) + x0 + 1];
        const i10 = lattice[(y0 + 1) * (cells + 1) + x0];
        const i11 = lattice[(y0 + 1) * (cells + 1) + x0 + 1];
        const top = i00 + (i01 - i00) * tx;
        const bot = i10 + (i11 - i10) * tx;
        field[y * w + x] += amplitude * (top + (bot - top) * ty);
      }
    }
    total += amplitude;
    amplitude *= 0.5;
  }
  for (let i = 0; i < field.length; i++) field[i] /= total;
  return field;
}

export function fog(img: Image, severity = 2, seed = 7): Image {
  const { h, w } = img;
  const blend = 0.15 + 0.12 * severity; // severity 1..5 -> 0.27..0.75
  const field = noiseField(h, w, seed, 4);
  const out = new Float32Array(img.data.length);
  for (let p = 0; p < h * w; p++) {
    const haze = 0.6 + 0.4 * field[p]; // bright, low-contrast veil
    for (let ch = 0; ch < 3; ch++) {
      const i = p * 3 + ch;
      out[i] = clip01((1 - blend) * img.data[i] + blend * haze);
    }
  }
  return { h, w, data: out };
}

export function frost(img: Image, severity = 2, seed = 11): Image {
  const { h, w } = img;
  const blend = 0.1 + 0.1 * severity;
  const field = noiseField(h, w, seed, 5);
  const out = new Float32Array(img.data.length);
  for (let p = 0; p < h * w; p++) {
    // icy crystals: sharp bright patches where the noise exceeds a threshold
    const crystal = field[p] > 0.55 ? 0.85 + 0.15 * field[p] : 0.3 * field[p];
    for (let ch = 0; ch < 3; ch++) {
      const i = p * 3 + ch;
      const tint = ch === 2 ? 1.05 : 1.0; // slight blue cast
      out[i] = clip01((1 - blend) * img.data[i] + blend * clip01(crystal * tint));
    }
  }
  return { h, w, data: out };
}

export function colorJitter(
  img: Image,
  opts = { brightness: 1.15, contrast: 0.85, saturation: 1.3 },
): Image {
  const { h, w } = img;
  const out = new Float32Array(img.data.length);
  for (let p = 0; p < h * w; p++) {
    const r = img.data[p * 3];
    const g = img.data[p * 3 + 1];
    const b = img.data[p * 3 + 2];
    const gray = 0.299 * r + 0.587 * g + 0.114 * b;
    const channels = [r, g, b];
    for (let ch = 0; ch < 3; ch++) {
      let v = gray + opts.saturation * (channels[ch] - gray);
      v = 0.5 + opts.contrast * (v - 0.5);
      v *= opts.brightness;
      out[p * 3 + ch] = clip01(v);
    }
  }
  return { h, w, data: out };
}

export function applyPerturbation(img: Image, kind: PerturbationKind): Image {
  switch (kind) {
    case 'vertical_flip':
      return verticalFlip(img);
    case 'fog':
      return fog(img);
    case 'frost':
      return frost(img);
    case 'color_jitter':
      return colorJitter(img);
  }
}
