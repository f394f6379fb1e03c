/**
 * Fast gradient sign attacks against the monitored segmentation model.
 *
 * Untargeted: ascend the cross-entropy of the model's own clean-label map,
 * x' = clip(x + alpha * sign(grad)). Targeted: descend toward the target
 * class. The total deviation is projected to the infinity-norm ball of
 * radius epsilon after every step and the image is clipped to [0, 1].
 * sign(0) = 0, so a zero-gradient input is left untouched.
 */

import * as tf from '@tensorflow/tfjs';

import type { ToyModel } from './model.js';
import type { Image } from './perturb.js';

export interface AttackConfig {
  kind: 'fgsm' | 'fgsm_iter';
  alpha: number;
  epsilon: number;
  nIters: number;
  /** optional class id for a targeted attack */
  target?: number;
}

export function validateAttack(config: AttackConfig, nClasses: number): void {
  if (config.alpha > config.epsilon) {
    throw new Error(`alpha ${config.alpha} exceeds epsilon ${config.epsilon}`);
  }
  if (config.nIters < 1) {
    throw new Error('nIters must be >= 1');
  }
  if (config.target !== undefined && (config.target < 0 || config.target >= nClasses)) {
    throw new Error(`target class ${config.target} out of range [0, ${nClasses})`);
  }
}

/** default hyperparameters: one-step budget 0.02, iterated budget 0.01 */
export function defaultAttack(kind: AttackConfig['kind']): AttackConfig {
  return kind === 'fgsm'
    ? { kind, alpha: 0.005, epsilon: 0.02, nIters: 1 }
    : { kind, alpha: 0.005, epsilon: 0.01, nIters: 5 };
}

export function fgsmAttack(toy: ToyModel, img: Image, config: AttackConfig): Image {
  validateAttack(config, toy.nClasses);
  const { h, w } = img;
  const steps = config.kind === 'fgsm' ? 1 : config.nIters;

  const original = tf.tensor4d(img.data, [1, h, w, 3]);
  // fixed reference labels: the model's own prediction on the clean input
  // (or the attacker's target class everywhere)
  const refLabels = tf.tidy(() => {
    if (config.target !== undefined) {
      return tf.fill([1, h, w], config.target, 'int32');
    }
    const probs = toy.model.predict(original) as tf.Tensor4D;
    return tf.argMax(probs, -1) as tf.Tensor3D;
  });
  const oneHot = tf.tidy(() => tf.oneHot(refLabels.flatten(), toy.nClasses).reshape([1, h, w, toy.nClasses]));

  const lossOf = (x: tf.Tensor4D): tf.Scalar =>
    tf.tidy(() => {
      const probs = toy.model.apply(x) as tf.Tensor4D;
      const logp = tf.log(tf.add(probs, 1e-9));
      return tf.neg(tf.mean(tf.sum(tf.mul(oneHot, logp), -1))) as tf.Scalar;
    });
  const gradOf = tf.grad((x: tf.Tensor) => lossOf(x as tf.Tensor4D));

  let current = original.clone();
  for (let step = 0; step < steps; step++) {
    const next = tf.tidy(() => {
      const g = gradOf(current);
      // untargeted ascends the loss; targeted descends toward the target
      const direction = config.target === undefined ? tf.sign(g) : tf.neg(tf.sign(g));
      const stepped = tf.add(current, tf.mul(direction, config.alpha));
      const delta = tf.clipByValue(tf.sub(stepped, original), -config.epsilon, config.epsilon);
      return tf.clipByValue(tf.add(original, delta), 0, 1) as tf.Tensor4D;
    });
    current.dispose();
    current = next;
  }

  const data = current.dataSync() as Float32Array;
  const out: Image = { h, w, data: new Float32Array(data) };
  current.dispose();
  original.dispose();
  refLabels.dispose();
  oneHot.dispose();
  return out;
}
