/** PNG/JPEG decoding to a flat luminance buffer. */

import { readFileSync } from "node:fs";

import jpeg from "jpeg-js";
import { PNG } from "pngjs";

export interface DecodedImage {
  width: number;
  height: number;
  /** Row-major luminance, one byte-range value (0..255) per pixel. */
  gray: Float64Array;
}

export class ImageDecodeError extends Error {}

function toGray(rgba: Uint8Array | Buffer, width: number, height: number): DecodedImage {
  const gray = new Float64Array(width * height);
  for (let i = 0; i < width * height; i++) {
    const r = rgba[4 * i];
    const g = rgba[4 * i + 1];
    const b = rgba[4 * i + 2];
    gray[i] = 0.299 * r + 0.587 * g + 0.114 * b;
  }
  return { width, height, gray };
}

export function decodeImage(path: string): DecodedImage {
  let data: Buffer;
  try {
    data = readFileSync(path);
  } catch (err) {
    throw new ImageDecodeError(`cannot read ${path}: ${(err as Error).message}`);
  }
  // PNG signature
  if (data.length > 8 && data.readUInt32BE(0) === 0x89504e47) {
    try {
      const png = PNG.sync.read(data);
      return toGray(png.data, png.width, png.height);
    } catch (err) {
      throw new ImageDecodeError(`cannot decode PNG ${path}: ${(err as Error).message}`);
    }
  }
  // JPEG signature
  if (data.length > 3 && data[0] === 0xff && data[1] === 0xd8) {
    try {
      const img = jpeg.decode(data, { useTArray: true, maxMemoryUsageInMB: 512 });
      return toGray(img.data, img.width, img.height);
    } catch (err) {
      throw new ImageDecodeError(`cannot decode JPEG ${path}: ${(err as Error).message}`);
    }
  }
  throw new ImageDecodeError(`unsupported image format: ${path}`);
}
