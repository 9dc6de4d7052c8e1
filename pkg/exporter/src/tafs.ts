/**
 * Binary feature container shared with the adaptation engine.
 *
 * Layout (little-endian):
 *   magic "TAFS" | u32 version=1 | u32 n | u32 d | u32 K | u32 flags
 *   f32 features[n*d] row-major
 *   i32 labels[n]            if flags bit0 (-1 = unknown)
 *   f32 headW[K*d], f32 headB[K]   if flags bit1
 */

import * as fs from 'fs'

export const MAGIC = 'TAFS'
export const VERSION = 1
export const FLAG_LABELS = 1
export const FLAG_HEAD = 2
export const HEADER_BYTES = 24

export interface FeaturePayload {
  features: Float32Array // n * d, row-major
  n: number
  d: number
  labels?: Int32Array
  head?: { w: Float32Array; b: Float32Array; k: number }
}

export function encodeFeatureFile(payload: FeaturePayload): Buffer {
  const { features, n, d, labels, head } = payload
  if (features.length !== n * d) {
    throw new Error(`features length ${features.length} != n*d = ${n * d}`)
  }
  for (let i = 0; i < features.length; i++) {
    if (!Number.isFinite(features[i])) {
      throw new Error(`non-finite feature at flat index ${i}`)
    }
  }
  let flags = 0
  let total = HEADER_BYTES + 4 * n * d
  if (labels) {
    if (labels.length !== n) throw new Error(`labels length ${labels.length} != n = ${n}`)
    flags |= FLAG_LABELS
    total += 4 * n
  }
  let k = 0
  if (head) {
    k = head.k
    if (head.w.length !== k * d) throw new Error(`head W length ${head.w.length} != K*d`)
    if (head.b.length !== k) throw new Error(`head b length ${head.b.length} != K`)
    flags |= FLAG_HEAD
    total += 4 * (k * d + k)
  }
  const buf = Buffer.alloc(total)
  buf.write(MAGIC, 0, 'ascii')
  buf.writeUInt32LE(VERSION, 4)
  buf.writeUInt32LE(n, 8)
  buf.writeUInt32LE(d, 12)
  buf.writeUInt32LE(k, 16)
  buf.writeUInt32LE(flags, 20)
  let off = HEADER_BYTES
  for (let i = 0; i < features.length; i++, off += 4) buf.writeFloatLE(features[i], off)
  if (labels) {
    for (let i = 0; i < n; i++, off += 4) buf.writeInt32LE(labels[i], off)
  }
  if (head) {
    for (let i = 0; i < head.w.length; i++, off += 4) buf.writeFloatLE(head.w[i], off)
    for (let i = 0; i < head.b.length; i++, off += 4) buf.writeFloatLE(head.b[i], off)
  }
  return buf
}

export function writeFeatureFile(path: string, payload: FeaturePayload): void {
  fs.writeFileSync(path, encodeFeatureFile(payload))
}

export function readFeatureFile(path: string): FeaturePayload {
  const buf = fs.readFileSync(path)
  if (buf.length < HEADER_BYTES) throw new Error(`truncated header (${buf.length} bytes)`)
  if (buf.toString('ascii', 0, 4) !== MAGIC) throw new Error('bad magic')
  if (buf.readUInt32LE(4) !== VERSION) throw new Error('unsupported version')
  const n = buf.readUInt32LE(8)
  const d = buf.readUInt32LE(12)
  const k = buf.readUInt32LE(16)
  const flags = buf.readUInt32LE(20)
  let expected = HEADER_BYTES + 4 * n * d
  if (flags & FLAG_LABELS) expected += 4 * n
  if (flags & FLAG_HEAD) expected += 4 * (k * d + k)
  if (buf.length !== expected) throw new Error(`expected ${expected} bytes, found ${buf.length}`)

  let off = HEADER_BYTES
  const features = new Float32Array(n * d)
  for (let i = 0; i < features.length; i++, off += 4) features[i] = buf.readFloatLE(off)
  const out: FeaturePayload = { features, n, d }
  if (flags & FLAG_LABELS) {
    const labels = new Int32Array(n)
    for (let i = 0; i < n; i++, off += 4) labels[i] = buf.readInt32LE(off)
    out.labels = labels
  }
  if (flags & FLAG_HEAD) {
    const w = new Float32Array(k * d)
    for (let i = 0; i < w.length; i++, off += 4) w[i] = buf.readFloatLE(off)
    const b = new Float32Array(k)
    for (let i = 0; i < k; i++, off += 4) b[i] = buf.readFloatLE(off)
    out.head = { w, b, k }
  }
  return out
}
