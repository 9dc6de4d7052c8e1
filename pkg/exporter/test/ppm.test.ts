import { describe, expect, it } from 'vitest'

import { decodePpm, encodePpm } from '../src/ppm'

describe('ppm codec', () => {
  it('round-trips an image', () => {
    const width = 4
    const height = 3
    const pixels = Float32Array.from({ length: width * height * 3 }, (_, i) => (i % 256) / 255)
    const decoded = decodePpm(encodePpm({ width, height, pixels }))
    expect(decoded.width).toBe(width)
    expect(decoded.height).toBe(height)
    for (let i = 0; i < pixels.length; i++) {
      expect(Math.abs(decoded.pixels[i] - pixels[i])).toBeLessThan(1 / 255)
    }
  })

  it('skips comments in the header', () => {
    const body = Buffer.alloc(3, 128)
    const buf = Buffer.concat([Buffer.from('P6\n# a comment\n1 1\n255\n', 'ascii'), body])
    const img = decodePpm(buf)
    expect(img.width).toBe(1)
    expect(img.pixels[0]).toBeCloseTo(128 / 255, 6)
  })

  it('rejects other formats', () => {
    expect(() => decodePpm(Buffer.from('P3\n1 1\n255\n0 0 0\n', 'ascii'))).toThrow(/P6/)
  })

  it('rejects truncated payloads', () => {
    const buf = Buffer.concat([Buffer.from('P6\n2 2\n255\n', 'ascii'), Buffer.alloc(5)])
    expect(() => decodePpm(buf)).toThrow(/truncated/)
  })
})
