// Pure pixel composition for the three-plane viewer. Every function
// returns a plain RGBA buffer so rendering is testable without a real
// canvas; main.ts blits the buffers via putImageData.

export interface Rgba {
  width: number;
  height: number;
  data: Uint8ClampedArray;
}

export interface PlaneOverlays {
  baseline?: Uint8Array | null; // binary masks, same (h, w) as the plane
  refined?: Uint8Array | null;
  label?: Uint8Array | null;
  draft?: Uint8Array | null; // in-progress edit, axial only
}

export const COLORS = {
  baseline: [64, 140, 255] as const,
  refined: [255, 80, 80] as const,
  label: [80, 220, 120] as const,
  draft: [255, 200, 40] as const,
  marker: [255, 60, 60] as const,
  neighbor: [255, 120, 60] as const,
  farther: [90, 160, 255] as const,
  suggested: [255, 220, 60] as const,
};

export function makeBuffer(width: number, height: number): Rgba {
  return { width, height, data: new Uint8ClampedArray(width * height * 4) };
}

function put(buf: Rgba, y: number, x: number, rgb: readonly number[], alpha = 255): void {
  if (y < 0 || x < 0 || y >= buf.height || x >= buf.width) return;
  const o = (y * buf.width + x) * 4;
  buf.data[o] = rgb[0];
  buf.data[o + 1] = rgb[1];
  buf.data[o + 2] = rgb[2];
  buf.data[o + 3] = alpha;
}

function blend(buf: Rgba, y: number, x: number, rgb: readonly number[], alpha: number): void {
  if (y < 0 || x < 0 || y >= buf.height || x >= buf.width) return;
  const o = (y * buf.width + x) * 4;
  const a = alpha / 255;
  buf.data[o] = buf.data[o] * (1 - a) + rgb[0] * a;
  buf.data[o + 1] = buf.data[o + 1] * (1 - a) + rgb[1] * a;
  buf.data[o + 2] = buf.data[o + 2] * (1 - a) + rgb[2] * a;
  buf.data[o + 3] = 255;
}

export function contour(mask: Uint8Array, h: number, w: number): Uint8Array {
  const edge = new Uint8Array(h * w);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      if (!mask[y * w + x]) continue;
      const bare =
        y === 0 || y === h - 1 || x === 0 || x === w - 1 ||
        !mask[(y - 1) * w + x] || !mask[(y + 1) * w + x] ||
        !mask[y * w + x - 1] || !mask[y * w + x + 1];
      if (bare) edge[y * w + x] = 1;
    }
  }
  return edge;
}

export interface PlaneSpec {
  values: number[][]; // grayscale source, shape (h, w)
  window: [number, number]; // linear window (lo, hi)
  overlays: PlaneOverlays;
  // for coronal/sagittal planes, row r corresponds to axial slice r:
  markerRows?: number[]; // edited axial indices: draw marker lines
  provenanceRows?: string[] | null; // per-row provenance tags for tinting
  suggestedRow?: number | null;
}

export function renderPlane(spec: PlaneSpec): Rgba {
  const h = spec.values.length;
  const w = spec.values[0]?.length ?? 0;
  const buf = makeBuffer(w, h);
  const [lo, hi] = spec.window;
  const span = hi - lo || 1;
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const g = Math.max(0, Math.min(255, Math.round(((spec.values[y][x] - lo) / span) * 255)));
      put(buf, y, x, [g, g, g]);
    }
  }
  if (spec.provenanceRows) {
    for (let y = 0; y < Math.min(h, spec.provenanceRows.length); y++) {
      const tag = spec.provenanceRows[y];
      const tint = tag.startsWith("neighbor") ? COLORS.neighbor : COLORS.farther;
      for (let x = 0; x < w; x++) blend(buf, y, x, tint, 40);
    }
  }
  const layers: Array<[keyof PlaneOverlays, readonly number[]]> = [
    ["baseline", COLORS.baseline],
    ["refined", COLORS.refined],
    ["label", COLORS.label],
  ];
  for (const [key, color] of layers) {
    const mask = spec.overlays[key];
    if (!mask) continue;
    const edge = contour(mask, h, w);
    for (let i = 0; i < edge.length; i++) {
      if (edge[i]) put(buf, Math.floor(i / w), i % w, color);
    }
  }
  if (spec.overlays.draft) {
    const d = spec.overlays.draft;
    for (let i = 0; i < d.length; i++) {
      if (d[i]) blend(buf, Math.floor(i / w), i % w, COLORS.draft, 110);
    }
  }
  if (spec.suggestedRow != null) {
    for (let x = 0; x < w; x += 2) blend(buf, spec.suggestedRow, x, COLORS.suggested, 200);
  }
  for (const row of spec.markerRows ?? []) {
    for (let x = 0; x < w; x++) put(buf, row, x, COLORS.marker);
  }
  return buf;
}

export function renderDscStrip(
  perSliceDsc: number[],
  editedSlices: number[],
  cellWidth = 6,
  height = 28,
): Rgba {
  const buf = makeBuffer(perSliceDsc.length * cellWidth, height);
  const edited = new Set(editedSlices);
  for (let s = 0; s < perSliceDsc.length; s++) {
    const v = Math.max(0, Math.min(1, perSliceDsc[s]));
    const barTop = Math.round((1 - v) * (height - 1));
    const color = edited.has(s) ? COLORS.marker : ([120, 200, 140] as const);
    for (let x = s * cellWidth; x < (s + 1) * cellWidth - 1; x++) {
      for (let y = barTop; y < height; y++) put(buf, y, x, color);
    }
  }
  return buf;
}

export function sliceValuesToMask(values: number[][], threshold = 0.5): Uint8Array {
  const h = values.length;
  const w = values[0]?.length ?? 0;
  const out = new Uint8Array(h * w);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      if (values[y][x] >= threshold) out[y * w + x] = 1;
    }
  }
  return out;
}

export function valueRange(values: number[][]): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const row of values) {
    for (const v of row) {
      if (v < lo) lo = v;
      if (v > hi) hi = v;
    }
  }
  return lo === Infinity ? [0, 1] : [lo, hi];
}
