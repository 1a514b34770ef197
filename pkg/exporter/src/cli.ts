/**
 * CLI: export backbone feature maps for a folder (or list) of images.
 *
 *   node dist/cli.js --images <dir | file...> --out <dir> [--seed 0]
 */

import { readdirSync, statSync } from 'fs'
import { extname, join } from 'path'
import { exportImages } from './export.js'

const IMAGE_EXTENSIONS = new Set(['.png', '.jpg', '.jpeg'])

function collectImages(paths: string[]): string[] {
  const images: string[] = []
  for (const path of paths) {
    if (statSync(path).isDirectory()) {
      for (const name of readdirSync(path).sort()) {
        if (IMAGE_EXTENSIONS.has(extname(name).toLowerCase())) {
          images.push(join(path, name))
        }
      }
    } else {
      images.push(path)
    }
  }
  return images
}

function parseArgs(argv: string[]): { images: string[]; out: string; seed: number } {
  const images: string[] = []
  let out = ''
  let seed = 0
  for (let i = 0; i < argv.length; i++) {
    switch (argv[i]) {
      case '--images':
        while (i + 1 < argv.length && !argv[i + 1].startsWith('--')) {
          images.push(argv[++i])
        }
        break
      case '--out':
        out = argv[++i]
        break
      case '--seed':
        seed = Number(argv[++i])
        break
      default:
        throw new Error(`unknown argument ${argv[i]}`)
    }
  }
  if (images.length === 0 || !out || !Number.isInteger(seed)) {
    throw new Error('usage: --images <dir | file...> --out <dir> [--seed 0]')
  }
  return { images, out, seed }
}

function main(): number {
  let args
  try {
    args = parseArgs(process.argv.slice(2))
  } catch (err) {
    console.error(`error: ${(err as Error).message}`)
    return 2
  }
  try {
    const result = exportImages({
      imagePaths: collectImages(args.images),
      outDir: args.out,
      seed: args.seed,
    })
    console.log(
      `exported ${result.exported.length} image(s) to ${args.out}` +
        (result.skipped.length ? `, skipped ${result.skipped.length}` : ''),
    )
    return 0
  } catch (err) {
    console.error(`error: ${(err as Error).message}`)
    return 1
  }
}

process.exit(main())
