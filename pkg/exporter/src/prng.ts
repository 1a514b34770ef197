/**
 * Small deterministic PRNG (mulberry32) for seeding backbone weights.
 * Gaussian draws use Box-Muller on the uniform stream.
 */

export function mulberry32(seed: number): () => number {
  let state = seed >>> 0
  return () => {
    state = (state + 0x6d2b79f5) >>> 0
    let t = state
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

export function gaussian(uniform: () => number): () => number {
  let spare: number | null = null
  return () => {
    if (spare !== null) {
      const value = spare
      spare = null
      return value
    }
    let u = 0
    let v = 0
    do {
      u = uniform()
    } while (u === 0)
    v = uniform()
    const radius = Math.sqrt(-2.0 * Math.log(u))
    spare = radius * Math.sin(2.0 * Math.PI * v)
    return radius * Math.cos(2.0 * Math.PI * v)
  }
}

/** Float32 weight tensor scaled by 1/sqrt(fanIn), fixed draw order. */
export function seededWeights(shape: number[], fanIn: number, seed: number): Float32Array {
  const next = gaussian(mulberry32(seed))
  const count = shape.reduce((a, b) => a * b, 1)
  const scale = 1.0 / Math.sqrt(fanIn)
  const out = new Float32Array(count)
  for (let i = 0; i < count; i++) {
    out[i] = next() * scale
  }
  return out
}
