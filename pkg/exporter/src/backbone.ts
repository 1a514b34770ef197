/**
 * Deterministic local backbone with two feature taps.
 *
 * A fixed stack of stride-2 3x3 convolutions (seeded random weights, ReLU)
 * stands in for a pretrained network: the "local" tap is spatially larger
 * (stride 16, 14x14 on a 224 input) than the "global" tap (stride 32, 7x7),
 * which is the contract the downstream extraction pass relies on. Weights
 * depend only on the seed, so exports are reproducible anywhere.
 */

import * as tf from '@tensorflow/tfjs'
import { seededWeights } from './prng.js'

export const BACKBONE_ID = 'seeded-cnn-v1'

interface ConvSpec {
  inChannels: number
  outChannels: number
}

/** stem + 4 stages; tap after stage 3 (local) and stage 4 (global) */
const LAYERS: ConvSpec[] = [
  { inChannels: 3, outChannels: 16 },
  { inChannels: 16, outChannels: 32 },
  { inChannels: 32, outChannels: 48 },
  { inChannels: 48, outChannels: 64 },
  { inChannels: 64, outChannels: 96 },
]

export interface Backbone {
  id: string
  seed: number
  kernels: tf.Tensor4D[]
}

export function createBackbone(seed: number): Backbone {
  const kernels = LAYERS.map((layer, index) => {
    const shape = [3, 3, layer.inChannels, layer.outChannels]
    const fanIn = 9 * layer.inChannels
    const values = seededWeights(shape, fanIn, seed * 1000 + index)
    return tf.tensor4d(values, shape as [number, number, number, number])
  })
  return { id: BACKBONE_ID, seed, kernels }
}

export function disposeBackbone(backbone: Backbone): void {
  backbone.kernels.forEach(kernel => kernel.dispose())
}

export interface FeatureTaps {
  /** mid-level map, channels-first (c3, h2, w2) */
  local: { dims: number[]; data: Float32Array }
  /** high-level map, channels-first (c4, h, w), spatially smaller */
  global: { dims: number[]; data: Float32Array }
}

function toChannelsFirst(feature: tf.Tensor3D): { dims: number[]; data: Float32Array } {
  const transposed = tf.transpose(feature, [2, 0, 1])
  const data = transposed.dataSync() as Float32Array
  const dims = transposed.shape.slice()
  transposed.dispose()
  return { dims, data: new Float32Array(data) }
}

/** Run the backbone on a preprocessed [h, w, 3] tensor and pull both taps. */
export function extractTaps(backbone: Backbone, input: tf.Tensor3D): FeatureTaps {
  const [local, global_] = tf.tidy(() => {
    let x = tf.expandDims(input, 0) as tf.Tensor4D
    const taps: tf.Tensor3D[] = []
    backbone.kernels.forEach((kernel, index) => {
      x = tf.conv2d(x, kernel, 2, 'same')
      x = tf.relu(x)
      if (index === 3 || index === 4) {
        taps.push(tf.squeeze(x, [0]))
      }
    })
    return taps
  })
  const result: FeatureTaps = {
    local: toChannelsFirst(local),
    global: toChannelsFirst(global_),
  }
  local.dispose()
  global_.dispose()
  return result
}
