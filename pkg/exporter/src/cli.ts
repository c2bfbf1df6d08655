#!/usr/bin/env node
/**
 * visprior-export export --model grid:64 --images ./imgs \
 *     --entities entities.txt --template "a photo of {name}" --out ./store
 */

import { EncoderLoadError } from "./encoders.js";
import { runExport } from "./export.js";
import { SpecError, parseEntityFile } from "./spec.js";

const USAGE = `usage: visprior-export export --model <id> --images <dir> --entities <file> \\
           [--template "a photo of {name}"] [--out <dir>] [--batch-size 16]

Built-in encoders: grid:<dim> (offline, deterministic). The entity file has
one display name per line, optionally followed by a tab and an image glob.`;

function parseArgs(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (!arg.startsWith("--")) throw new SpecError(`unexpected argument "${arg}"`);
    const value = argv[i + 1];
    if (value === undefined || value.startsWith("--")) {
      throw new SpecError(`flag ${arg} needs a value`);
    }
    flags.set(arg.slice(2), value);
    i++;
  }
  return flags;
}

export function main(argv: string[]): number {
  try {
    if (argv[0] !== "export") {
      console.error(USAGE);
      return 2;
    }
    const flags = parseArgs(argv.slice(1));
    for (const required of ["model", "images", "entities"]) {
      if (!flags.has(required)) throw new SpecError(`missing --${required}`);
    }
    const result = runExport({
      encoderId: flags.get("model")!,
      imageRoot: flags.get("images")!,
      entities: parseEntityFile(flags.get("entities")!),
      outDir: flags.get("out") ?? "store",
      template: flags.get("template") ?? "a photo of {name}",
      batchSize: Number(flags.get("batch-size") ?? 16),
    });
    console.log(
      `wrote ${result.manifestPath}: ${result.imageRows} image rows, ` +
        `${result.textRows} text rows` +
        (result.skipped.length ? `, skipped ${result.skipped.length} image(s)` : ""),
    );
    return 0;
  } catch (err) {
    if (err instanceof SpecError || err instanceof EncoderLoadError) {
      console.error(`error: ${err.message}`);
      return 1;
    }
    throw err;
  }
}

if (import.meta.url === `file://${process.argv[1]}`) {
  process.exit(main(process.argv.slice(2)));
}
