// Stroke rasterization for the mask editor: brush paint / erase strokes
// and polygon fill, composited in order onto an (H, W) boolean grid.
// The draft keeps the stroke list, so undo is dropping the last stroke.

export interface BrushStroke {
  kind: "brush" | "erase";
  points: Array<[number, number]>; // (y, x) in pixel coordinates
  radius: number;
}

export interface PolygonStroke {
  kind: "polygon";
  vertices: Array<[number, number]>; // (y, x), implicitly closed
}

export type Stroke = BrushStroke | PolygonStroke;

export interface Draft {
  h: number;
  w: number;
  base: Uint8Array | null; // starting mask (e.g. current prediction slice)
  strokes: Stroke[];
}

export function newDraft(h: number, w: number, base: Uint8Array | null = null): Draft {
  if (base !== null && base.length !== h * w) {
    throw new Error(`base mask length ${base.length} != ${h}x${w}`);
  }
  return { h, w, base, strokes: [] };
}

export function pushStroke(draft: Draft, stroke: Stroke): Draft {
  return { ...draft, strokes: [...draft.strokes, stroke] };
}

export function undoStroke(draft: Draft): Draft {
  return { ...draft, strokes: draft.strokes.slice(0, -1) };
}

export function hasStrokes(draft: Draft): boolean {
  return draft.strokes.length > 0;
}

export function rasterize(draft: Draft): Uint8Array {
  const mask = draft.base ? Uint8Array.from(draft.base) : new Uint8Array(draft.h * draft.w);
  for (const stroke of draft.strokes) {
    if (stroke.kind === "polygon") {
      fillPolygon(mask, draft.h, draft.w, stroke.vertices);
    } else {
      const value = stroke.kind === "brush" ? 1 : 0;
      for (let i = 0; i < stroke.points.length; i++) {
        stampDisc(mask, draft.h, draft.w, stroke.points[i], stroke.radius, value);
        if (i > 0) {
          stampSegment(mask, draft.h, draft.w, stroke.points[i - 1], stroke.points[i], stroke.radius, value);
        }
      }
    }
  }
  return mask;
}

function stampDisc(
  mask: Uint8Array,
  h: number,
  w: number,
  center: [number, number],
  radius: number,
  value: 0 | 1,
): void {
  const [cy, cx] = center;
  const r2 = radius * radius;
  const y0 = Math.max(0, Math.floor(cy - radius));
  const y1 = Math.min(h - 1, Math.ceil(cy + radius));
  const x0 = Math.max(0, Math.floor(cx - radius));
  const x1 = Math.min(w - 1, Math.ceil(cx + radius));
  for (let y = y0; y <= y1; y++) {
    for (let x = x0; x <= x1; x++) {
      const dy = y - cy;
      const dx = x - cx;
      if (dy * dy + dx * dx <= r2) mask[y * w + x] = value;
    }
  }
}

function stampSegment(
  mask: Uint8Array,
  h: number,
  w: number,
  a: [number, number],
  b: [number, number],
  radius: number,
  value: 0 | 1,
): void {
  const steps = Math.ceil(Math.hypot(b[0] - a[0], b[1] - a[1]));
  for (let s = 1; s < steps; s++) {
    const t = s / steps;
    stampDisc(mask, h, w, [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], radius, value);
  }
}

// even-odd scanline fill over pixel centers
function fillPolygon(
  mask: Uint8Array,
  h: number,
  w: number,
  vertices: Array<[number, number]>,
): void {
  if (vertices.length < 3) return;
  for (let y = 0; y < h; y++) {
    const yc = y + 0.0;
    const xs: number[] = [];
    for (let i = 0; i < vertices.length; i++) {
      const [y1, x1] = vertices[i];
      const [y2, x2] = vertices[(i + 1) % vertices.length];
      if (y1 === y2) continue;
      if ((yc >= Math.min(y1, y2)) && (yc < Math.max(y1, y2))) {
        xs.push(x1 + ((yc - y1) / (y2 - y1)) * (x2 - x1));
      }
    }
    xs.sort((a, b) => a - b);
    for (let k = 0; k + 1 < xs.length; k += 2) {
      const x0 = Math.max(0, Math.ceil(xs[k]));
      const x1 = Math.min(w - 1, Math.floor(xs[k + 1]));
      for (let x = x0; x <= x1; x++) mask[y * w + x] = 1;
    }
  }
}
