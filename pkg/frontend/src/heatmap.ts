/** Degradation-map coloring for the overlay: worse cells run blue -> red. */

import { DegradationMap } from "./api.js";

export interface Rgba {
  r: number;
  g: number;
  b: number;
  a: number;
}

/**
 * Per-cell severity in [0, 1]: wide PSFs (high S_f) and poor patch quality
 * (low S_i) both push toward 1. Each grid is min-max normalized on its own.
 */
export function severityGrid(map: DegradationMap): number[][] {
  const flatF = map.s_f.flat();
  const flatI = map.s_i.flat();
  const fMin = Math.min(...flatF);
  const fMax = Math.max(...flatF);
  const iMin = Math.min(...flatI);
  const iMax = Math.max(...flatI);
  const fSpan = fMax - fMin || 1;
  const iSpan = iMax - iMin || 1;
  return map.s_f.map((row, i) =>
    row.map((sf, j) => {
      const widthTerm = (sf - fMin) / fSpan;
      const qualityTerm = 1 - (map.s_i[i][j] - iMin) / iSpan;
      return (widthTerm + qualityTerm) / 2;
    }),
  );
}

export function severityColor(severity: number): Rgba {
  const s = Math.min(Math.max(severity, 0), 1);
  return {
    r: Math.round(255 * s),
    g: 40,
    b: Math.round(255 * (1 - s)),
    a: 0.45,
  };
}
