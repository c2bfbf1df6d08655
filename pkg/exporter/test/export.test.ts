import { spawnSync } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync, mkdirSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { PNG } from "pngjs";
import { afterAll, describe, expect, it } from "vitest";

import { EncoderLoadError, loadEncoder, seededGaussian } from "../src/encoders.js";
import { runExport } from "../src/export.js";
import { main as cliMain } from "../src/cli.js";
import { SpecError, globToRegExp, parseEntityFile, slugify } from "../src/spec.js";

const tempRoots: string[] = [];
function workdir(): string {
  const dir = mkdtempSync(join(tmpdir(), "exporter-test-"));
  tempRoots.push(dir);
  return dir;
}
afterAll(() => {
  // tmpdirs are reaped by the OS; nothing to clean deterministically
});

function writePng(path: string, pixels: Float64Array, side: number): void {
  const png = new PNG({ width: side, height: side });
  for (let i = 0; i < side * side; i++) {
    const value = Math.max(0, Math.min(255, Math.round(pixels[i])));
    png.data[4 * i] = value;
    png.data[4 * i + 1] = value;
    png.data[4 * i + 2] = value;
    png.data[4 * i + 3] = 255;
  }
  writeFileSync(path, PNG.sync.write(png));
}

function randomPng(path: string, side: number, seed: number): void {
  const pixels = new Float64Array(side * side);
  let state = seed >>> 0 || 1;
  for (let i = 0; i < pixels.length; i++) {
    state = (1103515245 * state + 12345) >>> 0; // LCG is plenty for pixels
    pixels[i] = state % 256;
  }
  writePng(path, pixels, side);
}

/** Images whose pixel grid encodes the text-tower vector of the entity. */
function alignedPng(path: string, renderedText: string, dim: number): void {
  const side = Math.ceil(Math.sqrt(dim));
  const vector = seededGaussian(`grid-text:${renderedText}`, side * side);
  const pixels = new Float64Array(side * side);
  for (let i = 0; i < side * side; i++) pixels[i] = 128 + 30 * vector[i];
  writePng(path, pixels, side);
}

function basicSpec(dir: string, names: string[], imagesPerEntity = 2, dim = 64) {
  const imageRoot = join(dir, "images");
  mkdirSync(imageRoot, { recursive: true });
  names.forEach((name, e) => {
    for (let j = 0; j < imagesPerEntity; j++) {
      randomPng(join(imageRoot, `${slugify(name)}-${j}.png`), 12, 1000 * e + j);
    }
  });
  const entityFile = join(dir, "entities.txt");
  writeFileSync(entityFile, names.join("\n") + "\n");
  return {
    encoderId: `grid:${dim}`,
    imageRoot,
    entities: parseEntityFile(entityFile),
    outDir: join(dir, "store"),
    template: "a photo of {name}",
    batchSize: 16,
  };
}

function loadViaPrimary(manifestPath: string) {
  const snippet = `
import json, logging, sys
import numpy as np
captured = []
class Capture(logging.Handler):
    def emit(self, record):
        if record.levelno >= logging.WARNING:
            captured.append(record.getMessage())
logging.getLogger().addHandler(Capture())
logging.getLogger().setLevel(logging.DEBUG)
from visprior.store import load_store
store = load_store(sys.argv[1])
img = np.linalg.norm(store.image_embeddings.data.astype(np.float64), axis=1)
txt = np.linalg.norm(store.text_embeddings.data.astype(np.float64), axis=1)
print(json.dumps({
    "warnings": captured,
    "image_rows": store.image_embeddings.rows,
    "text_rows": store.text_embeddings.rows,
    "dim": store.dim,
    "max_norm_error": float(max(np.abs(img - 1.0).max(initial=0.0), np.abs(txt - 1.0).max(initial=0.0))),
}))
`;
  const run = spawnSync("python3", ["-c", snippet, manifestPath], { encoding: "utf-8" });
  expect(run.status, run.stderr).toBe(0);
  return JSON.parse(run.stdout.trim());
}

describe("export contract with the primary toolkit", () => {
  it("writes 6 image rows and 3 text rows for 3 entities x 2 images", () => {
    const spec = basicSpec(workdir(), ["Alpha Falls", "Beta Bridge", "Gamma Gate"]);
    const result = runExport(spec);
    expect(result.imageRows).toBe(6);
    expect(result.textRows).toBe(3);
    const manifest = JSON.parse(readFileSync(result.manifestPath, "utf-8"));
    expect(manifest.format_version).toBe("1");
    expect(manifest.normalized).toBe(false);
    expect(manifest.encoder_label).toBe("grid:64");
    expect(manifest.entities.map((e: { entity_id: string }) => e.entity_id)).toEqual([
      "alpha-falls",
      "beta-bridge",
      "gamma-gate",
    ]);
    expect(manifest.export.batch_size).toBe(16);
  });

  it("loads through load_store with zero warnings and unit norms", () => {
    const spec = basicSpec(workdir(), ["Alpha Falls", "Beta Bridge", "Gamma Gate"]);
    const result = runExport(spec);
    const loaded = loadViaPrimary(result.manifestPath);
    expect(loaded.warnings).toEqual([]);
    expect(loaded.image_rows).toBe(6);
    expect(loaded.text_rows).toBe(3);
    expect(loaded.dim).toBe(64);
    expect(loaded.max_norm_error).toBeLessThanOrEqual(1e-5);
  });

  it("re-exports equal tensors for an identical spec", () => {
    const dir = workdir();
    const spec = basicSpec(dir, ["Alpha Falls", "Beta Bridge", "Gamma Gate"]);
    runExport(spec);
    const again = { ...spec, outDir: join(dir, "store2") };
    runExport(again);
    const readF32 = (path: string) => {
      const buf = readFileSync(path);
      return new Float32Array(buf.buffer, buf.byteOffset, buf.byteLength / 4);
    };
    for (const name of ["images.f32", "texts.f32"]) {
      const a = readF32(join(spec.outDir, name));
      const b = readF32(join(again.outDir, name));
      expect(a.length).toBeGreaterThan(0);
      expect(b.length).toBe(a.length);
      let worst = 0;
      for (let i = 0; i < a.length; i++) worst = Math.max(worst, Math.abs(a[i] - b[i]));
      expect(worst).toBeLessThanOrEqual(1e-5);
    }
  });

  it("yields rank 1 for the majority of a visually distinct sanity set", () => {
    const dir = workdir();
    const imageRoot = join(dir, "images");
    mkdirSync(imageRoot);
    const names = Array.from({ length: 10 }, (_, i) => `Sanity Entity ${i}`);
    const dim = 64;
    for (const name of names) {
      alignedPng(join(imageRoot, `${slugify(name)}-0.png`), `a photo of ${name}`, dim);
    }
    const entityFile = join(dir, "entities.txt");
    writeFileSync(entityFile, names.join("\n") + "\n");
    const result = runExport({
      encoderId: `grid:${dim}`,
      imageRoot,
      entities: parseEntityFile(entityFile),
      outDir: join(dir, "store"),
      template: "a photo of {name}",
      batchSize: 4,
    });

    const ranksJson = join(dir, "ranks.json");
    const run = spawnSync(
      "python3",
      ["-m", "visprior", "rank", "--store", result.manifestPath, "--out", join(dir, "ranks.csv"), "--json", ranksJson],
      { encoding: "utf-8" },
    );
    expect(run.status, run.stderr).toBe(0);
    const table = JSON.parse(readFileSync(ranksJson, "utf-8"));
    const ranks = Object.values(table.results).map((r: any) => r.rank_e as number);
    expect(ranks).toHaveLength(10);
    const atOne = ranks.filter((r) => r === 1).length;
    expect(atOne).toBeGreaterThanOrEqual(6); // majority
  });
});

describe("error handling", () => {
  it("skips undecodable images with a manifest note", () => {
    const dir = workdir();
    const spec = basicSpec(dir, ["Alpha Falls"]);
    writeFileSync(join(spec.imageRoot, "alpha-falls-bad.png"), "this is not a png");
    const result = runExport(spec);
    expect(result.imageRows).toBe(2);
    expect(result.skipped).toEqual(["alpha-falls-bad.png"]);
    const manifest = JSON.parse(readFileSync(result.manifestPath, "utf-8"));
    expect(manifest.export.skipped_images).toEqual(["alpha-falls-bad.png"]);
  });

  it("fails when an entity resolves no images", () => {
    const dir = workdir();
    const spec = basicSpec(dir, ["Alpha Falls"]);
    writeFileSync(join(dir, "entities.txt"), "Alpha Falls\nGhost Entity\n");
    spec.entities = parseEntityFile(join(dir, "entities.txt"));
    expect(() => runExport(spec)).toThrow(/Ghost Entity/);
  });

  it("fails fast for unknown encoder identifiers", () => {
    expect(() => loadEncoder("openai-vit-l-14")).toThrow(EncoderLoadError);
    expect(() => loadEncoder("grid:notanumber")).toThrow(EncoderLoadError);
  });

  it("requires the {name} placeholder in the template", () => {
    const spec = basicSpec(workdir(), ["Alpha Falls"]);
    spec.template = "a photo";
    expect(() => runExport(spec)).toThrow(SpecError);
  });
});

describe("spec parsing", () => {
  it("slugify matches the toolkit's entity ids", () => {
    expect(slugify("Portuguese Synagogue")).toBe("portuguese-synagogue");
    expect(slugify("  Mercedes-Benz Stadium ")).toBe("mercedes-benz-stadium");
  });

  it("per-entity globs select images", () => {
    const dir = workdir();
    const imageRoot = join(dir, "images");
    mkdirSync(join(imageRoot, "shots"), { recursive: true });
    randomPng(join(imageRoot, "shots", "one.png"), 8, 1);
    randomPng(join(imageRoot, "shots", "two.png"), 8, 2);
    randomPng(join(imageRoot, "other.png"), 8, 3);
    const entityFile = join(dir, "entities.txt");
    writeFileSync(entityFile, "Alpha Falls\tshots/*.png\n");
    const result = runExport({
      encoderId: "grid:16",
      imageRoot,
      entities: parseEntityFile(entityFile),
      outDir: join(dir, "store"),
      template: "{name}",
      batchSize: 2,
    });
    expect(result.imageRows).toBe(2);
  });

  it("glob translation handles ** and ?", () => {
    expect(globToRegExp("**/*.png").test("a/b/c.png")).toBe(true);
    expect(globToRegExp("*.png").test("a/b.png")).toBe(false);
    expect(globToRegExp("img?.png").test("img1.png")).toBe(true);
  });

  it("duplicate entities are rejected", () => {
    const dir = workdir();
    const path = join(dir, "entities.txt");
    writeFileSync(path, "Alpha\nalpha\n");
    expect(() => parseEntityFile(path)).toThrow(/duplicate/);
  });
});

describe("cli", () => {
  it("runs an export end to end", () => {
    const dir = workdir();
    const spec = basicSpec(dir, ["Alpha Falls", "Beta Bridge", "Gamma Gate"]);
    const code = cliMain([
      "export",
      "--model", "grid:64",
      "--images", spec.imageRoot,
      "--entities", join(dir, "entities.txt"),
      "--template", "a photo of {name}",
      "--out", join(dir, "cli-store"),
    ]);
    expect(code).toBe(0);
    const manifest = JSON.parse(readFileSync(join(dir, "cli-store", "manifest.json"), "utf-8"));
    expect(manifest.text_tensor.rows).toBe(3);
  });

  it("reports usage problems without stack traces", () => {
    expect(cliMain(["export", "--model", "grid:64"])).toBe(1);
    expect(cliMain(["frobnicate"])).toBe(2);
  });
});
