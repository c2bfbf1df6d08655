/**
 * Run the encoder over every resolved (entity, image) pair and write a
 * store the toolkit loads as-is: manifest.json plus two raw row-major
 * little-endian float32 tensor files, `normalized: false`.
 */

import { existsSync, mkdirSync, readdirSync, statSync, writeFileSync } from "node:fs";
import { join, relative, sep } from "node:path";

import { DualEncoder, loadEncoder } from "./encoders.js";
import { DecodedImage, ImageDecodeError, decodeImage } from "./images.js";
import { EntitySpec, ExportSpec, SpecError, globToRegExp, renderTemplate, validateSpec } from "./spec.js";

export interface ExportResult {
  manifestPath: string;
  imageRows: number;
  textRows: number;
  skipped: string[];
}

function listFiles(root: string): string[] {
  if (!existsSync(root)) throw new SpecError(`image root not found: ${root}`);
  const out: string[] = [];
  const walk = (dir: string) => {
    for (const entry of readdirSync(dir).sort()) {
      const path = join(dir, entry);
      if (statSync(path).isDirectory()) walk(path);
      else out.push(path);
    }
  };
  walk(root);
  return out;
}

function resolveImages(spec: ExportSpec, entity: EntitySpec, files: string[]): string[] {
  const relatives = files.map((f) => relative(spec.imageRoot, f).split(sep).join("/"));
  let matcher: (rel: string) => boolean;
  if (entity.glob) {
    const re = globToRegExp(entity.glob);
    matcher = (rel) => re.test(rel);
  } else {
    // default: files under <slug>/ or named <slug>.<ext> / <slug>-*.<ext>
    matcher = (rel) => {
      if (rel.startsWith(`${entity.slug}/`)) return true;
      const base = rel.split("/").at(-1)!.replace(/\.[^.]+$/, "");
      return base === entity.slug || base.startsWith(`${entity.slug}-`) || base.startsWith(`${entity.slug}_`);
    };
  }
  return files.filter((_, i) => matcher(relatives[i]));
}

function writeTensor(path: string, rows: Float32Array[], dim: number): void {
  const buffer = Buffer.alloc(rows.length * dim * 4);
  rows.forEach((row, r) => {
    if (row.length !== dim) throw new SpecError(`encoder returned dim ${row.length}, expected ${dim}`);
    for (let i = 0; i < dim; i++) buffer.writeFloatLE(row[i], (r * dim + i) * 4);
  });
  writeFileSync(path, buffer);
}

function inBatches<T, R>(items: T[], size: number, run: (chunk: T[]) => R[]): R[] {
  const out: R[] = [];
  for (let start = 0; start < items.length; start += size) {
    out.push(...run(items.slice(start, start + size)));
  }
  return out;
}

export function runExport(spec: ExportSpec): ExportResult {
  validateSpec(spec);
  const encoder: DualEncoder = loadEncoder(spec.encoderId);
  const files = listFiles(spec.imageRoot);
  const skipped: string[] = [];

  // Resolve and decode per entity; an undecodable file is skipped with a
  // warning, but an entity left with no images is fatal.
  const imagePaths: string[] = [];
  const decoded: DecodedImage[] = [];
  const imageIndex = new Map<string, number[]>();
  for (const entity of spec.entities) {
    const candidates = resolveImages(spec, entity, files);
    const rows: number[] = [];
    for (const path of candidates) {
      try {
        const image = decodeImage(path);
        rows.push(decoded.length);
        decoded.push(image);
        imagePaths.push(path);
      } catch (err) {
        if (!(err instanceof ImageDecodeError)) throw err;
        console.warn(`warning: skipping ${path}: ${err.message}`);
        skipped.push(relative(spec.imageRoot, path).split(sep).join("/"));
      }
    }
    if (rows.length === 0) {
      throw new SpecError(
        `entity "${entity.name}" resolves no decodable images under ${spec.imageRoot}`,
      );
    }
    imageIndex.set(entity.slug, rows);
  }

  const imageRows = inBatches(decoded, spec.batchSize, (chunk) => encoder.encodeImages(chunk));
  const texts = spec.entities.map((e) => renderTemplate(spec.template, e.name));
  const textRows = inBatches(texts, spec.batchSize, (chunk) => encoder.encodeTexts(chunk));

  mkdirSync(spec.outDir, { recursive: true });
  writeTensor(join(spec.outDir, "images.f32"), imageRows, encoder.dim);
  writeTensor(join(spec.outDir, "texts.f32"), textRows, encoder.dim);

  const manifest = {
    format_version: "1",
    dim: encoder.dim,
    encoder_label: encoder.id,
    image_tensor: { path: "images.f32", rows: imageRows.length },
    text_tensor: { path: "texts.f32", rows: textRows.length },
    normalized: false,
    entities: spec.entities.map((e) => ({
      entity_id: e.slug,
      name: e.name,
      images: imageIndex.get(e.slug)!,
    })),
    export: {
      template: spec.template,
      batch_size: spec.batchSize,
      preprocessing: encoder.preprocessing,
      skipped_images: skipped,
    },
  };
  const manifestPath = join(spec.outDir, "manifest.json");
  writeFileSync(manifestPath, JSON.stringify(manifest, null, 2) + "\n");
  return { manifestPath, imageRows: imageRows.length, textRows: textRows.length, skipped };
}
