import { describe, expect, it } from 'vitest'
import { mkdtempSync, readFileSync } from 'fs'
import { tmpdir } from 'os'
import { join } from 'path'
import { decodeCsft, encodeCsft, readCsft, writeCsft } from '../src/csft.js'

function tempDir(): string {
  return mkdtempSync(join(tmpdir(), 'csft-'))
}

describe('CSFT encoding', () => {
  it('round-trips dims and data', () => {
    const data = new Float32Array([1.5, -2.25, 0, 4, 5, 6])
    const tensor = { dims: [1, 2, 3], data }
    const decoded = decodeCsft(encodeCsft(tensor))
    expect(decoded.dims).toEqual([1, 2, 3])
    expect(Array.from(decoded.data)).toEqual(Array.from(data))
  })

  it('writes the documented header layout', () => {
    const buffer = encodeCsft({ dims: [2, 3], data: new Float32Array(6) })
    expect(Array.from(buffer.subarray(0, 4))).toEqual([0x43, 0x53, 0x46, 0x54])
    expect(buffer.readUInt32LE(4)).toBe(1) // version
    expect(buffer.readUInt32LE(8)).toBe(2) // ndims
    expect(buffer.readUInt32LE(12)).toBe(2)
    expect(buffer.readUInt32LE(16)).toBe(3)
    expect(buffer.length).toBe(20 + 6 * 4)
  })

  it('rejects non-finite values on write and read', () => {
    expect(() =>
      encodeCsft({ dims: [2], data: new Float32Array([1, Number.NaN]) }),
    ).toThrow(/non-finite/)
    const good = encodeCsft({ dims: [1], data: new Float32Array([1]) })
    good.writeFloatLE(Number.POSITIVE_INFINITY, good.length - 4)
    expect(() => decodeCsft(good)).toThrow(/non-finite/)
  })

  it('rejects bad magic and truncation', () => {
    const buffer = encodeCsft({ dims: [2], data: new Float32Array([1, 2]) })
    const bad = Buffer.from(buffer)
    bad[0] = 0x58
    expect(() => decodeCsft(bad)).toThrow(/magic/)
    expect(() => decodeCsft(buffer.subarray(0, buffer.length - 1))).toThrow(/bytes/)
  })

  it('file write -> read -> write is byte-identical', () => {
    const dir = tempDir()
    const a = join(dir, 'a.csft')
    const b = join(dir, 'b.csft')
    const data = new Float32Array(24).map((_, i) => Math.fround(Math.sin(i)))
    writeCsft(a, { dims: [2, 3, 4], data })
    writeCsft(b, readCsft(a))
    expect(readFileSync(a).equals(readFileSync(b))).toBe(true)
  })
})
