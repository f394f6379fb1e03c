import * as tf from '@tensorflow/tfjs';
import { describe, expect, it } from 'vitest';

import { buildToyModel, captureActivations, selectLayers } from '../src/model.js';

function rampImage(h: number, w: number): Float32Array {
  const data = new Float32Array(h * w * 3);
  for (let i = 0; i < data.length; i++) {
    data[i] = (i % 97) / 96;
  }
  return data;
}

describe('toy model', () => {
  it('captures activations equal to a direct forward trace', () => {
    const toy = buildToyModel({ height: 4, width: 4 });
    const img = rampImage(4, 4);
    const captured = captureActivations(toy, img);

    const [kernel, bias] = toy.model.getLayer('conv1').getWeights();
    const manual = tf.tidy(() => {
      const x = tf.tensor4d(img, [1, 4, 4, 3]);
      const conv = tf.add(tf.conv2d(x as tf.Tensor4D, kernel as tf.Tensor4D, 1, 'same'), bias);
      return tf.relu(conv).dataSync() as Float32Array;
    });

    // captured layout is channel-major; manual trace is NHWC
    const conv1 = captured.layers.find((l) => l.name === 'conv1')!;
    expect(conv1.c).toBe(8);
    for (let y = 0; y < 4; y++) {
      for (let x = 0; x < 4; x++) {
        for (let c = 0; c < 8; c++) {
          const got = conv1.values[c * 16 + y * 4 + x];
          const want = manual[(y * 4 + x) * 8 + c];
          expect(got).toBeCloseTo(want, 5);
        }
      }
    }
  });

  it('total channel count covers every selected layer', () => {
    const toy = buildToyModel({ height: 4, width: 4, nClasses: 3 });
    const captured = captureActivations(toy, rampImage(4, 4));
    const channels = captured.layers.reduce((acc, l) => acc + l.c, 0);
    expect(channels).toBe(8 + 3);
  });

  it('is deterministic across separate builds', () => {
    const img = rampImage(6, 5);
    const a = captureActivations(buildToyModel({ height: 6, width: 5, seed: 99 }), img);
    const b = captureActivations(buildToyModel({ height: 6, width: 5, seed: 99 }), img);
    expect(Array.from(a.layers[0].values)).toEqual(Array.from(b.layers[0].values));
    expect(Array.from(a.softmax)).toEqual(Array.from(b.softmax));
  });

  it('softmax maps sum to one per pixel', () => {
    const toy = buildToyModel({ height: 3, width: 3, nClasses: 4 });
    const captured = captureActivations(toy, rampImage(3, 3));
    for (let p = 0; p < 9; p++) {
      let total = 0;
      for (let c = 0; c < 4; c++) total += captured.softmax[c * 9 + p];
      expect(total).toBeCloseTo(1.0, 5);
    }
  });

  it('label map holds the argmax class ids', () => {
    const toy = buildToyModel({ height: 3, width: 3 });
    const captured = captureActivations(toy, rampImage(3, 3));
    for (let p = 0; p < 9; p++) {
      const label = captured.labels[p];
      for (let c = 0; c < toy.nClasses; c++) {
        expect(captured.softmax[label * 9 + p]).toBeGreaterThanOrEqual(captured.softmax[c * 9 + p]);
      }
    }
  });

  it('rejects a selection matching no layer', () => {
    expect(() => selectLayers(['conv1', 'conv2_logits'], 'before_batchnorm')).toThrow(/matches no layer/);
  });

  it('conv_outputs keeps both conv layers of this net', () => {
    expect(selectLayers(['conv1', 'conv2_logits'], 'conv_outputs')).toEqual(['conv1', 'conv2_logits']);
  });
});
