/** Minimal binary PPM (P6) image codec; pixels come out as floats in [0, 1]. */

import * as fs from 'fs'

export interface Image {
  width: number
  height: number
  /** RGB interleaved, length width*height*3, values in [0, 1] */
  pixels: Float32Array
}

export function decodePpm(buf: Buffer): Image {
  let pos = 0
  const token = (): string => {
    // skip whitespace and '#' comment lines between header tokens
    for (;;) {
      while (pos < buf.length && /\s/.test(String.fromCharCode(buf[pos]))) pos++
      if (pos < buf.length && buf[pos] === 0x23) {
        while (pos < buf.length && buf[pos] !== 0x0a) pos++
      } else {
        break
      }
    }
    const start = pos
    while (pos < buf.length && !/\s/.test(String.fromCharCode(buf[pos]))) pos++
    return buf.toString('ascii', start, pos)
  }
  if (token() !== 'P6') throw new Error('not a binary PPM (P6) file')
  const width = parseInt(token(), 10)
  const height = parseInt(token(), 10)
  const maxval = parseInt(token(), 10)
  if (!(width > 0 && height > 0)) throw new Error('bad PPM dimensions')
  if (maxval !== 255) throw new Error(`unsupported maxval ${maxval}`)
  pos++ // single whitespace after maxval
  const need = width * height * 3
  if (buf.length - pos < need) throw new Error('truncated PPM payload')
  const pixels = new Float32Array(need)
  for (let i = 0; i < need; i++) pixels[i] = buf[pos + i] / 255
  return { width, height, pixels }
}

export function readPpm(path: string): Image {
  return decodePpm(fs.readFileSync(path))
}

export function encodePpm(img: Image): Buffer {
  const header = Buffer.from(`P6\n${img.width} ${img.height}\n255\n`, 'ascii')
  const body = Buffer.alloc(img.pixels.length)
  for (let i = 0; i < img.pixels.length; i++) {
    body[i] = Math.max(0, Math.min(255, Math.round(img.pixels[i] * 255)))
  }
  return Buffer.concat([header, body])
}

export function writePpm(path: string, img: Image): void {
  fs.writeFileSync(path, encodePpm(img))
}
