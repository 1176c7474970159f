/**
 * Client-side duplicate of the server's colorize + overlay math, so alpha
 * slider moves re-blend instantly from the served raw grid without another
 * request. Deliberately mirrors the render pipeline bit for bit: float64
 * piecewise-linear color lookup, round-half-up to 8 bits, then
 * (1-alpha)*base + alpha*heat with the same rounding. The test suite pins
 * it against golden vectors produced by the server implementation.
 */

export type Rgb = [number, number, number];
export type ColorStops = Array<[number, Rgb]>;

/** Five-stop thermal ramp; must stay identical to the server's default. */
export const THERMAL: ColorStops = [
  [0.0, [0, 0, 128]],
  [0.25, [0, 255, 255]],
  [0.5, [0, 255, 0]],
  [0.75, [255, 255, 0]],
  [1.0, [128, 0, 0]],
];

export function roundHalfUp(x: number): number {
  return Math.min(255, Math.max(0, Math.floor(x + 0.5)));
}

/** Unit-range values -> packed RGB bytes via piecewise-linear stops. */
export function colorize(
  values: number[],
  degenerate: boolean,
  stops: ColorStops = THERMAL,
): Uint8ClampedArray {
  const out = new Uint8ClampedArray(values.length * 3);
  for (let i = 0; i < values.length; i++) {
    const v = degenerate ? 0 : Math.min(1, Math.max(0, values[i]));
    let seg = stops.length - 2;
    for (let s = 0; s < stops.length - 1; s++) {
      if (v < stops[s + 1][0]) {
        seg = s;
        break;
      }
    }
    const [t0, c0] = stops[seg];
    const [t1, c1] = stops[seg + 1];
    const f = (v - t0) / (t1 - t0);
    for (let ch = 0; ch < 3; ch++) {
      out[i * 3 + ch] = roundHalfUp(c0[ch] * (1 - f) + c1[ch] * f);
    }
  }
  return out;
}

/** (1-alpha)*base + alpha*heat on packed RGB byte arrays. */
export function blend(
  base: Uint8ClampedArray,
  heat: Uint8ClampedArray,
  alpha: number,
): Uint8ClampedArray {
  if (base.length !== heat.length) {
    throw new Error(`blend length mismatch ${base.length} != ${heat.length}`);
  }
  const out = new Uint8ClampedArray(base.length);
  for (let i = 0; i < base.length; i++) {
    out[i] = roundHalfUp((1 - alpha) * base[i] + alpha * heat[i]);
  }
  return out;
}

/** Full client-side re-blend: colorize the raw grid, blend onto the base. */
export function reblend(
  gridValues: number[],
  degenerate: boolean,
  baseRgb: Uint8ClampedArray,
  alpha: number,
): Uint8ClampedArray {
  return blend(baseRgb, colorize(gridValues, degenerate), alpha);
}

/** Packed RGB -> RGBA pixels for putImageData. */
export function rgbToRgba(
  rgb: Uint8ClampedArray,
): Uint8ClampedArray<ArrayBuffer> {
  const n = rgb.length / 3;
  const out = new Uint8ClampedArray(new ArrayBuffer(n * 4));
  for (let i = 0; i < n; i++) {
    out[i * 4] = rgb[i * 3];
    out[i * 4 + 1] = rgb[i * 3 + 1];
    out[i * 4 + 2] = rgb[i * 3 + 2];
    out[i * 4 + 3] = 255;
  }
  return out;
}
