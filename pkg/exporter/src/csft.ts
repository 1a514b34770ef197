/**
 * CSFT tensor file support.
 *
 * Layout: magic "CSFT" (43 53 46 54), u32 LE version = 1, u32 ndims,
 * ndims x u32 dims, then row-major little-endian float32 data. Readers must
 * reject non-finite values.
 */

import { writeFileSync, renameSync, readFileSync, rmSync } from 'fs'
import { dirname, join } from 'path'

export const CSFT_MAGIC = Buffer.from([0x43, 0x53, 0x46, 0x54])
export const CSFT_VERSION = 1

export interface CsftTensor {
  dims: number[]
  /** row-major values, length = product of dims */
  data: Float32Array
}

export function encodeCsft(tensor: CsftTensor): Buffer {
  const { dims, data } = tensor
  if (dims.length === 0 || dims.some(d => !Number.isInteger(d) || d <= 0)) {
    throw new Error(`tensor dims must be positive integers, got [${dims}]`)
  }
  const count = dims.reduce((a, b) => a * b, 1)
  if (data.length !== count) {
    throw new Error(`data length ${data.length} != product of dims ${count}`)
  }
  for (let i = 0; i < data.length; i++) {
    if (!Number.isFinite(data[i])) {
      throw new Error(`refusing to write non-finite value at flat index ${i}`)
    }
  }
  const header = Buffer.alloc(4 + 4 + 4 + 4 * dims.length)
  CSFT_MAGIC.copy(header, 0)
  header.writeUInt32LE(CSFT_VERSION, 4)
  header.writeUInt32LE(dims.length, 8)
  dims.forEach((d, i) => header.writeUInt32LE(d, 12 + 4 * i))
  const payload = Buffer.alloc(4 * count)
  for (let i = 0; i < count; i++) {
    payload.writeFloatLE(data[i], 4 * i)
  }
  return Buffer.concat([header, payload])
}

export function decodeCsft(buffer: Buffer, what = 'tensor'): CsftTensor {
  if (buffer.length < 12 || !buffer.subarray(0, 4).equals(CSFT_MAGIC)) {
    throw new Error(`${what}: bad magic at offset 0`)
  }
  const version = buffer.readUInt32LE(4)
  if (version !== CSFT_VERSION) {
    throw new Error(`${what}: unsupported version ${version} at offset 4`)
  }
  const ndims = buffer.readUInt32LE(8)
  if (ndims === 0 || ndims > 8) {
    throw new Error(`${what}: implausible ndims ${ndims} at offset 8`)
  }
  const dims: number[] = []
  for (let i = 0; i < ndims; i++) {
    dims.push(buffer.readUInt32LE(12 + 4 * i))
  }
  const count = dims.reduce((a, b) => a * b, 1)
  const start = 12 + 4 * ndims
  if (buffer.length !== start + 4 * count) {
    throw new Error(`${what}: expected ${start + 4 * count} bytes, got ${buffer.length}`)
  }
  const data = new Float32Array(count)
  for (let i = 0; i < count; i++) {
    data[i] = buffer.readFloatLE(start + 4 * i)
    if (!Number.isFinite(data[i])) {
      throw new Error(`${what}: non-finite value at flat index ${i}`)
    }
  }
  return { dims, data }
}

/** Write via a temp file + rename so interrupted runs never leave a
 * truncated artifact behind. */
export function atomicWrite(path: string, payload: Buffer | string): void {
  const tmp = join(dirname(path), `.tmp-${process.pid}-${Math.random().toString(36).slice(2)}`)
  try {
    writeFileSync(tmp, payload)
    renameSync(tmp, path)
  } catch (err) {
    try {
      rmSync(tmp, { force: true })
    } catch {
      // best effort cleanup
    }
    throw err
  }
}

export function writeCsft(path: string, tensor: CsftTensor): void {
  atomicWrite(path, encodeCsft(tensor))
}

export function readCsft(path: string): CsftTensor {
  return decodeCsft(readFileSync(path), path)
}
