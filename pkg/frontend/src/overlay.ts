/** Pixel-level overlay math, kept free of canvas handles so it is unit
 * testable: the mask PNG decodes to grayscale (0 background, 255 target);
 * the overlay tints target pixels with one hue at a given opacity. */

export interface Rgba {
  r: number;
  g: number;
  b: number;
}

export const OVERLAY_HUE: Rgba = { r: 64, g: 160, b: 255 };
export const POSITIVE_COLOR = "#2ecc40";
export const NEGATIVE_COLOR = "#ff4136";

/** Map decoded mask pixels (RGBA, grayscale content) to overlay RGBA. */
export function maskToOverlay(maskRgba: Uint8ClampedArray, opacity: number,
                              hue: Rgba = OVERLAY_HUE): Uint8ClampedArray {
  const out = new Uint8ClampedArray(maskRgba.length);
  const alpha = Math.round(Math.max(0, Math.min(1, opacity)) * 255);
  for (let i = 0; i < maskRgba.length; i += 4) {
    const fg = maskRgba[i] > 127;
    out[i] = hue.r;
    out[i + 1] = hue.g;
    out[i + 2] = hue.b;
    out[i + 3] = fg ? alpha : 0;
  }
  return out;
}

/** Gray [0,255] slice values to opaque RGBA for the base layer. */
export function grayToRgba(gray: Uint8Array | Uint8ClampedArray):
    Uint8ClampedArray {
  const out = new Uint8ClampedArray(gray.length * 4);
  for (let i = 0; i < gray.length; i++) {
    out[4 * i] = out[4 * i + 1] = out[4 * i + 2] = gray[i];
    out[4 * i + 3] = 255;
  }
  return out;
}

/** Canvas coordinates to pixel (row, col), or null outside the image. */
export function canvasToPixel(x: number, y: number, canvasW: number,
                              canvasH: number, imgW: number,
                              imgH: number): { row: number; col: number } | null {
  if (x < 0 || y < 0 || x >= canvasW || y >= canvasH) return null;
  const col = Math.floor((x / canvasW) * imgW);
  const row = Math.floor((y / canvasH) * imgH);
  if (row < 0 || row >= imgH || col < 0 || col >= imgW) return null;
  return { row, col };
}
