/**
 * Binary container for activation records, shared with the Python side.
 *
 * Layout: magic "DAAC" | version 0x01 | u32-LE header length | UTF-8 JSON
 * header | raw little-endian float32 payload, layer/channel/row-major.
 * The header carries dtype, layer shapes (c, h, w), the input id and the
 * perturbation tag; extra keys such as "kind" ride along unchanged.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';

export const MAGIC = 'DAAC';
export const VERSION = 1;

export const CLEAN = 'none';
export const TRAIN = 'train';
export const TEST = 'test';

export interface LayerData {
  name: string;
  /** channels */
  c: number;
  h: number;
  w: number;
  /** c*h*w float32 values, channel-major */
  values: Float32Array;
}

export interface ActivationRecord {
  inputId: string;
  perturbation: string;
  layers: LayerData[];
  extra?: Record<string, unknown>;
}

/** Stable stringify with lexicographically sorted keys, matching the reader. */
function sortedJson(value: unknown): string {
  if (Array.isArray(value)) {
    return '[' + value.map(sortedJson).join(',') + ']';
  }
  if (value !== null && typeof value === 'object') {
    const keys = Object.keys(value as Record<string, unknown>).sort();
    const body = keys.map(
      (k) => JSON.stringify(k) + ':' + sortedJson((value as Record<string, unknown>)[k]),
    );
    return '{' + body.join(',') + '}';
  }
  return JSON.stringify(value);
}

export function encodeRecord(record: ActivationRecord): Buffer {
  const header: Record<string, unknown> = {
    ...(record.extra ?? {}),
    dtype: 'f32',
    layers: record.layers.map((l) => ({ name: l.name, c: l.c, h: l.h, w: l.w })),
    input_id: record.inputId,
    perturbation: record.perturbation,
  };
  const blob = Buffer.from(sortedJson(header), 'utf-8');
  const chunks: Buffer[] = [Buffer.from(MAGIC, 'ascii'), Buffer.from([VERSION])];
  const lenBuf = Buffer.alloc(4);
  lenBuf.writeUInt32LE(blob.length, 0);
  chunks.push(lenBuf, blob);
  for (const layer of record.layers) {
    if (layer.values.length !== layer.c * layer.h * layer.w) {
      throw new Error(`layer ${layer.name}: ${layer.values.length} values for shape (${layer.c},${layer.h},${layer.w})`);
    }
    // Float32Array is little-endian on every platform node supports
    chunks.push(Buffer.from(layer.values.buffer, layer.values.byteOffset, layer.values.byteLength));
  }
  return Buffer.concat(chunks);
}

export function writeRecord(record: ActivationRecord, filePath: string): void {
  fs.writeFileSync(filePath, encodeRecord(record));
}

export function readRecord(filePath: string): ActivationRecord {
  const raw = fs.readFileSync(filePath);
  if (raw.length < 9 || raw.toString('ascii', 0, 4) !== MAGIC) {
    throw new Error(`bad magic bytes in ${filePath}`);
  }
  if (raw[4] !== VERSION) {
    throw new Error(`unsupported version ${raw[4]} in ${filePath}`);
  }
  const hlen = raw.readUInt32LE(5);
  const header = JSON.parse(raw.toString('utf-8', 9, 9 + hlen));
  let offset = 9 + hlen;
  const layers: LayerData[] = [];
  for (const entry of header.layers) {
    const n = entry.c * entry.h * entry.w;
    const values = new Float32Array(n);
    for (let i = 0; i < n; i++) {
      values[i] = raw.readFloatLE(offset + 4 * i);
    }
    offset += 4 * n;
    layers.push({ name: entry.name, c: entry.c, h: entry.h, w: entry.w, values });
  }
  if (offset !== raw.length) {
    throw new Error(`trailing payload bytes in ${filePath}`);
  }
  const extra: Record<string, unknown> = {};
  for (const key of Object.keys(header)) {
    if (!['dtype', 'layers', 'input_id', 'perturbation'].includes(key)) {
      extra[key] = header[key];
    }
  }
  return {
    inputId: header.input_id,
    perturbation: header.perturbation,
    layers,
    extra,
  };
}

export interface ManifestEntry {
  path: string;
  input_id: string;
  perturbation: string;
  split: string;
}

export interface Manifest {
  volume_dims: [number, number, number];
  layer_selection: string;
  records: ManifestEntry[];
}

export function writeManifest(manifest: Manifest, dir: string): string {
  const doc = {
    layer_selection: manifest.layer_selection,
    records: manifest.records,
    volume_dims: manifest.volume_dims,
  };
  const target = path.join(dir, 'manifest.json');
  fs.writeFileSync(target, JSON.stringify(doc, null, 2) + '\n');
  return target;
}
