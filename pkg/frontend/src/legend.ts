// Color legend and timing readout helpers, mirroring the server's "oxy"
// colormap stops and per-stage timing rows.

/** Piecewise-linear colormap stops: [fraction, r, g, b] with 0..1 channels. */
export const OXY_STOPS: ReadonlyArray<readonly [number, number, number, number]> = [
  [0.0, 0.0, 0.0, 1.0],
  [0.33, 0.0, 1.0, 1.0],
  [0.66, 1.0, 1.0, 0.0],
  [1.0, 1.0, 0.0, 0.0],
];

/** Map an oxygenation fraction (0 = blue, 1 = red) to an 8-bit RGB triple. */
export function legendColor(fraction: number): [number, number, number] {
  const f = Math.min(1, Math.max(0, fraction));
  let lo = OXY_STOPS[0]!;
  let hi = OXY_STOPS[OXY_STOPS.length - 1]!;
  for (let i = 0; i + 1 < OXY_STOPS.length; i++) {
    if (f >= OXY_STOPS[i]![0] && f <= OXY_STOPS[i + 1]![0]) {
      lo = OXY_STOPS[i]!;
      hi = OXY_STOPS[i + 1]!;
      break;
    }
  }
  const span = hi[0] - lo[0];
  const t = span === 0 ? 0 : (f - lo[0]) / span;
  return [
    Math.round(255 * (lo[1] + t * (hi[1] - lo[1]))),
    Math.round(255 * (lo[2] + t * (hi[2] - lo[2]))),
    Math.round(255 * (lo[3] + t * (hi[3] - lo[3]))),
  ];
}

/** Per-stage timing keys and display labels, in server order. */
export const TIMING_ROWS: ReadonlyArray<readonly [string, string]> = [
  ["reflectance_cube_ms", "Reflectance Cube"],
  ["rgb_image_ms", "RGB Image"],
  ["oxy_correlation_ms", "Oxy Correlation"],
  ["oxy_image_ms", "Oxy Image"],
  ["overhead_ms", "Add. Overhead"],
  ["total_ms", "Total (ms)"],
];

/** Format a timings document into [label, "12.3"] rows for display. */
export function formatTimings(timings: Record<string, number>): Array<[string, string]> {
  return TIMING_ROWS.map(([key, label]) => {
    const value = timings[key];
    return [label, value === undefined ? "-" : value.toFixed(2)];
  });
}
