/**
 * Export specification: which encoder, which images, which entities.
 *
 * The entity list file has one entity per line — a display name, optionally
 * followed by a tab and a glob (relative to the image root) selecting that
 * entity's images. Without a glob, files under `<slug>/` or starting with
 * `<slug>` are used. Blank lines and `#` comments are skipped.
 */

import { readFileSync } from "node:fs";

export interface EntitySpec {
  name: string;
  slug: string;
  glob?: string;
}

export interface ExportSpec {
  encoderId: string;
  imageRoot: string;
  entities: EntitySpec[];
  outDir: string;
  template: string;
  batchSize: number;
}

export class SpecError extends Error {}

/** Mirrors the toolkit's entity_id derivation: lowercase, hyphens. */
export function slugify(name: string): string {
  const slug = name
    .trim()
    .toLowerCase()
    .replace(/[^a-z0-9]+/g, "-")
    .replace(/^-+|-+$/g, "");
  if (!slug) throw new SpecError(`cannot derive an entity id from name "${name}"`);
  return slug;
}

export function renderTemplate(template: string, name: string): string {
  return template.replaceAll("{name}", name);
}

export function parseEntityFile(path: string): EntitySpec[] {
  const out: EntitySpec[] = [];
  const seen = new Set<string>();
  for (const rawLine of readFileSync(path, "utf-8").split("\n")) {
    const line = rawLine.trim();
    if (!line || line.startsWith("#")) continue;
    const [name, glob] = line.split("\t").map((part) => part.trim());
    const slug = slugify(name);
    if (seen.has(slug)) throw new SpecError(`duplicate entity "${name}" (${slug})`);
    seen.add(slug);
    out.push({ name, slug, glob: glob || undefined });
  }
  if (out.length === 0) throw new SpecError(`entity file ${path} lists no entities`);
  return out;
}

export function validateSpec(spec: ExportSpec): void {
  if (!spec.template.includes("{name}")) {
    throw new SpecError(`template "${spec.template}" has no {name} placeholder`);
  }
  if (spec.batchSize < 1) throw new SpecError(`batch size must be >= 1`);
}

/** Minimal glob: `*` within a segment, `**` across segments, `?` one char. */
export function globToRegExp(glob: string): RegExp {
  let pattern = "";
  for (let i = 0; i < glob.length; i++) {
    const ch = glob[i];
    if (ch === "*") {
      if (glob[i + 1] === "*") {
        pattern += ".*";
        i++;
        if (glob[i + 1] === "/") i++; // "**/" also matches zero directories
      } else {
        pattern += "[^/]*";
      }
    } else if (ch === "?") {
      pattern += "[^/]";
    } else {
      pattern += ch.replace(/[.+^${}()|[\]\\]/g, "\\$&");
    }
  }
  return new RegExp(`^${pattern}$`);
}
