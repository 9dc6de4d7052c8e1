/**
 * A small seeded convolutional backbone with a bias-free logit head.
 *
 * The final layer has no bias on purpose: the exporter L2-normalizes the
 * penultimate embeddings, and argmax(W f) is invariant to positive scaling
 * of f, so the engine's head predictions agree with the backbone's own
 * logits sample by sample.
 *
 * Save/load goes through explicit JSON + weight-blob files because the pure
 * JS tfjs build registers no file:// IO handlers.
 */

import * as fs from 'fs'
import * as path from 'path'
import * as tf from '@tensorflow/tfjs'

export const INPUT_SIZE = 16
export const EMBED_DIM = 32

export function buildBackbone(numClasses: number, seed = 7): tf.LayersModel {
  const model = tf.sequential()
  model.add(
    tf.layers.conv2d({
      inputShape: [INPUT_SIZE, INPUT_SIZE, 3],
      filters: 8,
      kernelSize: 3,
      activation: 'relu',
      kernelInitializer: tf.initializers.heNormal({ seed }),
      biasInitializer: 'zeros',
      name: 'conv1',
    }),
  )
  model.add(tf.layers.maxPooling2d({ poolSize: 2 }))
  model.add(
    tf.layers.conv2d({
      filters: 16,
      kernelSize: 3,
      activation: 'relu',
      kernelInitializer: tf.initializers.heNormal({ seed: seed + 1 }),
      biasInitializer: 'zeros',
      name: 'conv2',
    }),
  )
  model.add(tf.layers.maxPooling2d({ poolSize: 2 }))
  model.add(tf.layers.flatten())
  model.add(
    tf.layers.dense({
      units: EMBED_DIM,
      activation: 'tanh',
      kernelInitializer: tf.initializers.glorotUniform({ seed: seed + 2 }),
      biasInitializer: 'zeros',
      name: 'embed',
    }),
  )
  model.add(
    tf.layers.dense({
      units: numClasses,
      useBias: false,
      kernelInitializer: tf.initializers.glorotUniform({ seed: seed + 3 }),
      name: 'logits',
    }),
  )
  return model
}

export async function saveBackbone(model: tf.LayersModel, dir: string): Promise<void> {
  fs.mkdirSync(dir, { recursive: true })
  await model.save(
    tf.io.withSaveHandler(async (artifacts) => {
      const weightData = artifacts.weightData as ArrayBuffer
      fs.writeFileSync(
        path.join(dir, 'model.json'),
        JSON.stringify({
          modelTopology: artifacts.modelTopology,
          weightSpecs: artifacts.weightSpecs,
        }),
      )
      fs.writeFileSync(path.join(dir, 'weights.bin'), Buffer.from(weightData))
      return { modelArtifactsInfo: { dateSaved: new Date(), modelTopologyType: 'JSON' } }
    }),
  )
}

export async function loadBackbone(dir: string): Promise<tf.LayersModel> {
  const meta = JSON.parse(fs.readFileSync(path.join(dir, 'model.json'), 'utf-8'))
  const weightData = fs.readFileSync(path.join(dir, 'weights.bin'))
  return tf.loadLayersModel(
    tf.io.fromMemory({
      modelTopology: meta.modelTopology,
      weightSpecs: meta.weightSpecs,
      weightData: weightData.buffer.slice(
        weightData.byteOffset,
        weightData.byteOffset + weightData.byteLength,
      ),
    }),
  )
}

export interface BackboneOutputs {
  /** penultimate activations, one row per input */
  embeddings: tf.Tensor2D
  /** final-layer logits, one row per input */
  logits: tf.Tensor2D
}

export function runBackbone(model: tf.LayersModel, batch: tf.Tensor4D): BackboneOutputs {
  const embedLayer = model.getLayer('embed')
  const logitLayer = model.getLayer('logits')
  const trunk = tf.model({
    inputs: model.inputs,
    outputs: [embedLayer.output as tf.SymbolicTensor, logitLayer.output as tf.SymbolicTensor],
  })
  const [embeddings, logits] = trunk.predict(batch) as [tf.Tensor2D, tf.Tensor2D]
  return { embeddings, logits }
}

/** Head of the backbone as the engine expects it: W is K x d, bias is zero. */
export function extractHead(model: tf.LayersModel): { w: Float32Array; b: Float32Array; k: number } {
  const kernel = model.getLayer('logits').getWeights()[0] // [EMBED_DIM, K]
  const [d, k] = kernel.shape as [number, number]
  const data = kernel.dataSync() as Float32Array
  const w = new Float32Array(k * d)
  for (let row = 0; row < k; row++) {
    for (let col = 0; col < d; col++) {
      w[row * d + col] = data[col * k + row]
    }
  }
  return { w, b: new Float32Array(k), k }
}
