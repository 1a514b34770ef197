/**
 * Image loading: decode PNG/JPEG to RGB, resize to 256x256 (bilinear), then
 * center-crop 224x224. Grayscale sources come out of the decoders with equal
 * R/G/B, so everything downstream sees 3 channels.
 */

import { readFileSync } from 'fs'
import { extname } from 'path'
import * as tf from '@tensorflow/tfjs'
import { PNG } from 'pngjs'
import * as jpeg from 'jpeg-js'

export const RESIZE_TO = 256
export const CROP_TO = 224

export interface DecodedImage {
  width: number
  height: number
  /** RGBA bytes, length = width * height * 4 */
  data: Uint8Array
}

export function decodeImage(path: string): DecodedImage {
  const raw = readFileSync(path)
  const ext = extname(path).toLowerCase()
  if (ext === '.png') {
    const png = PNG.sync.read(raw)
    return { width: png.width, height: png.height, data: new Uint8Array(png.data) }
  }
  if (ext === '.jpg' || ext === '.jpeg') {
    const decoded = jpeg.decode(raw, { useTArray: true, formatAsRGBA: true })
    return { width: decoded.width, height: decoded.height, data: decoded.data }
  }
  throw new Error(`unsupported image extension ${ext || '(none)'} for ${path}`)
}

/** RGB float tensor in [0, 1], shape [height, width, 3]. */
export function toRgbTensor(image: DecodedImage): tf.Tensor3D {
  const { width, height, data } = image
  const rgb = new Float32Array(width * height * 3)
  for (let p = 0; p < width * height; p++) {
    rgb[3 * p] = data[4 * p] / 255
    rgb[3 * p + 1] = data[4 * p + 1] / 255
    rgb[3 * p + 2] = data[4 * p + 2] / 255
  }
  return tf.tensor3d(rgb, [height, width, 3])
}

/** Standard eval-mode preprocessing: resize then center crop. */
export function preprocess(image: DecodedImage): tf.Tensor3D {
  return tf.tidy(() => {
    const rgb = toRgbTensor(image)
    const resized = tf.image.resizeBilinear(rgb, [RESIZE_TO, RESIZE_TO])
    const offset = Math.floor((RESIZE_TO - CROP_TO) / 2)
    const cropped = tf.slice(resized, [offset, offset, 0], [CROP_TO, CROP_TO, 3])
    return tf.sub(cropped, 0.5) as tf.Tensor3D
  })
}
