/**
 * Walk a folder-per-class image tree, run the backbone, and write the
 * engine's binary feature file with L2-normalized penultimate embeddings,
 * integer labels from sorted folder order, and the final linear head.
 */

import * as fs from 'fs'
import * as path from 'path'
import * as tf from '@tensorflow/tfjs'

import { INPUT_SIZE, extractHead, loadBackbone, runBackbone } from './backbone'
import { readPpm } from './ppm'
import { writeFeatureFile } from './tafs'

export interface ExportManifest {
  backbone: string
  inputSize: number
  normalization: string
  classes: string[]
  countsPerClass: Record<string, number>
  skipped: number
  n: number
  d: number
  out: string
}

function listClassDirs(root: string): string[] {
  return fs
    .readdirSync(root, { withFileTypes: true })
    .filter((e) => e.isDirectory())
    .map((e) => e.name)
    .sort()
}

/** Nearest-neighbor resize + [0,1] scaling to the backbone's input grid. */
function toInputTensor(pixels: Float32Array, width: number, height: number): tf.Tensor3D {
  const img = tf.tensor3d(pixels, [height, width, 3])
  if (width === INPUT_SIZE && height === INPUT_SIZE) return img
  const resized = tf.image.resizeNearestNeighbor(img as tf.Tensor3D, [INPUT_SIZE, INPUT_SIZE])
  img.dispose()
  return resized as tf.Tensor3D
}

export async function exportFeatures(
  imageRoot: string,
  backboneDir: string,
  outPath: string,
): Promise<ExportManifest> {
  const classes = listClassDirs(imageRoot)
  if (classes.length < 2) {
    throw new Error(`need at least 2 class folders under ${imageRoot}, found ${classes.length}`)
  }
  const model = await loadBackbone(backboneDir)

  const tensors: tf.Tensor3D[] = []
  const labels: number[] = []
  const countsPerClass: Record<string, number> = {}
  let skipped = 0
  classes.forEach((cls, label) => {
    countsPerClass[cls] = 0
    const dir = path.join(imageRoot, cls)
    for (const name of fs.readdirSync(dir).sort()) {
      const file = path.join(dir, name)
      try {
        const img = readPpm(file)
        tensors.push(toInputTensor(img.pixels, img.width, img.height))
        labels.push(label)
        countsPerClass[cls]++
      } catch {
        skipped++
      }
    }
  })
  if (tensors.length === 0) throw new Error(`no readable images under ${imageRoot}`)

  const batch = tf.stack(tensors) as tf.Tensor4D
  tensors.forEach((t) => t.dispose())
  const { embeddings, logits } = runBackbone(model, batch)
  const normalized = tf.div(embeddings, tf.norm(embeddings, 'euclidean', 1, true))
  const features = (await normalized.data()) as Float32Array
  logits.dispose()

  const head = extractHead(model)
  const n = labels.length
  const d = normalized.shape[1] as number
  writeFeatureFile(outPath, {
    features: Float32Array.from(features),
    n,
    d,
    labels: Int32Array.from(labels),
    head,
  })
  return {
    backbone: backboneDir,
    inputSize: INPUT_SIZE,
    normalization: 'pixels scaled to [0,1]; embeddings L2-normalized',
    classes,
    countsPerClass,
    skipped,
    n,
    d,
    out: outPath,
  }
}
