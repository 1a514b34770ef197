/**
 * Export pipeline: image files -> paired CSFT feature maps + JSON manifest.
 *
 * Unreadable images are skipped with a logged warning; the run fails only
 * when nothing could be exported. Output pairs are named
 * <stem>.local.csft / <stem>.global.csft next to a manifest listing every
 * mapping plus the backbone identity, so a rerun can be checked byte for
 * byte.
 */

import { mkdirSync } from 'fs'
import { basename, extname, join } from 'path'
import { Backbone, BACKBONE_ID, createBackbone, disposeBackbone, extractTaps } from './backbone.js'
import { atomicWrite, writeCsft } from './csft.js'
import { CROP_TO, RESIZE_TO, decodeImage, preprocess } from './image.js'

export interface ExportSpec {
  imagePaths: string[]
  outDir: string
  seed: number
}

export interface ExportedImage {
  source: string
  local: string
  global: string
  localShape: number[]
  globalShape: number[]
}

export interface ExportResult {
  exported: ExportedImage[]
  skipped: string[]
  manifestPath: string
}

export function exportImages(spec: ExportSpec): ExportResult {
  if (spec.imagePaths.length === 0) {
    throw new Error('no input images given')
  }
  mkdirSync(spec.outDir, { recursive: true })
  const backbone: Backbone = createBackbone(spec.seed)
  const exported: ExportedImage[] = []
  const skipped: string[] = []
  try {
    for (const imagePath of spec.imagePaths) {
      let taps
      try {
        const decoded = decodeImage(imagePath)
        const input = preprocess(decoded)
        taps = extractTaps(backbone, input)
        input.dispose()
      } catch (err) {
        console.error(`warning: skipping ${imagePath}: ${(err as Error).message}`)
        skipped.push(imagePath)
        continue
      }
      const stem = basename(imagePath, extname(imagePath))
      const localPath = join(spec.outDir, `${stem}.local.csft`)
      const globalPath = join(spec.outDir, `${stem}.global.csft`)
      writeCsft(localPath, { dims: taps.local.dims, data: taps.local.data })
      writeCsft(globalPath, { dims: taps.global.dims, data: taps.global.data })
      exported.push({
        source: imagePath,
        local: localPath,
        global: globalPath,
        localShape: taps.local.dims,
        globalShape: taps.global.dims,
      })
    }
  } finally {
    disposeBackbone(backbone)
  }
  if (exported.length === 0) {
    throw new Error(`all ${spec.imagePaths.length} images failed to export`)
  }
  const manifestPath = join(spec.outDir, 'manifest.json')
  const manifest = {
    backbone: BACKBONE_ID,
    seed: spec.seed,
    preprocessing: { resize: RESIZE_TO, centerCrop: CROP_TO },
    images: exported,
  }
  atomicWrite(manifestPath, JSON.stringify(manifest, null, 2) + '\n')
  return { exported, skipped, manifestPath }
}
