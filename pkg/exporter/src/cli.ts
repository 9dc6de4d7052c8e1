/**
 * Exporter CLI.
 *
 *   make-backbone --out DIR [--classes K] [--seed N]
 *   export --root DIR --backbone DIR --out FILE
 */

import { buildBackbone, saveBackbone } from './backbone'
import { exportFeatures } from './export'

function parseFlags(argv: string[]): Record<string, string> {
  const out: Record<string, string> = {}
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith('--') || i + 1 >= argv.length) {
      throw new UsageError(`malformed arguments near ${argv[i]}`)
    }
    out[argv[i].slice(2)] = argv[i + 1]
  }
  return out
}

class UsageError extends Error {}

function need(flags: Record<string, string>, name: string): string {
  const v = flags[name]
  if (v === undefined) throw new UsageError(`missing required flag --${name}`)
  return v
}

async function main(): Promise<number> {
  const [cmd, ...rest] = process.argv.slice(2)
  try {
    if (cmd === 'make-backbone') {
      const flags = parseFlags(rest)
      const out = need(flags, 'out')
      const classes = parseInt(flags['classes'] ?? '2', 10)
      const seed = parseInt(flags['seed'] ?? '7', 10)
      const model = buildBackbone(classes, seed)
      await saveBackbone(model, out)
      console.log(JSON.stringify({ out, classes, seed }))
      return 0
    }
    if (cmd === 'export') {
      const flags = parseFlags(rest)
      const manifest = await exportFeatures(
        need(flags, 'root'),
        need(flags, 'backbone'),
        need(flags, 'out'),
      )
      console.log(JSON.stringify(manifest))
      return 0
    }
    throw new UsageError(`unknown command ${cmd ?? '(none)'}; use make-backbone or export`)
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`usage error: ${err.message}`)
      return 1
    }
    console.error(`error: ${(err as Error).message}`)
    return 2
  }
}

main().then((code) => {
  process.exitCode = code
})
