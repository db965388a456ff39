// View state and pure reducers. The rendered UI is a function of
// (server responses, this state, local draft strokes); nothing else is
// cached client-side, so a reload rebuilds the view from the API alone.

import type { Axis, SessionSummary } from "./api.js";

export interface OverlayToggles {
  baseline: boolean;
  refined: boolean;
  label: boolean;
  provenance: boolean;
}

export interface ViewState {
  sessionId: string;
  dims: [number, number, number]; // (D, H, W)
  activePlane: Axis;
  indices: Record<Axis, number>;
  overlays: OverlayToggles;
  brushSize: number;
  zoom: number;
  editingSlice: number | null; // axial index being painted; only one at a time
  editedSlices: number[];
  suggestedSlice: number | null;
  hasLabel: boolean;
  editCount: number;
}

export function planeExtent(dims: [number, number, number], axis: Axis): number {
  const [d, h, w] = dims;
  return axis === "axial" ? d : axis === "coronal" ? h : w;
}

export function initialState(summary: SessionSummary): ViewState {
  const dims = summary.dims;
  return {
    sessionId: summary.session_id,
    dims,
    activePlane: "axial",
    indices: {
      axial: Math.floor(dims[0] / 2),
      coronal: Math.floor(dims[1] / 2),
      sagittal: Math.floor(dims[2] / 2),
    },
    overlays: {
      baseline: true,
      refined: summary.edit_count > 0,
      label: false,
      provenance: summary.edit_count > 0,
    },
    brushSize: 2,
    zoom: 8,
    editingSlice: null,
    editedSlices: [...summary.edited_slices],
    suggestedSlice: summary.suggested_slice ?? null,
    hasLabel: summary.has_label,
    editCount: summary.edit_count,
  };
}

export function refinedAvailable(state: ViewState): boolean {
  return state.editCount > 0;
}

export function setIndex(state: ViewState, axis: Axis, index: number): ViewState {
  const clamped = Math.min(Math.max(index, 0), planeExtent(state.dims, axis) - 1);
  return { ...state, indices: { ...state.indices, [axis]: clamped } };
}

export function setActivePlane(state: ViewState, axis: Axis): ViewState {
  return { ...state, activePlane: axis };
}

export function toggleOverlay(state: ViewState, key: keyof OverlayToggles): ViewState {
  if (key === "refined" && !refinedAvailable(state)) return state; // disabled until an edit exists
  if (key === "label" && !state.hasLabel) return state;
  return { ...state, overlays: { ...state.overlays, [key]: !state.overlays[key] } };
}

export function beginEditing(state: ViewState): ViewState {
  // editing is axial-only; the edited slice is the current axial index
  return { ...state, activePlane: "axial", editingSlice: state.indices.axial };
}

export function cancelEditing(state: ViewState): ViewState {
  return { ...state, editingSlice: null };
}

export function applyEditResult(
  state: ViewState,
  summary: { edited: number; suggested: number | null },
): ViewState {
  return {
    ...state,
    editingSlice: null,
    editCount: state.editCount + 1,
    editedSlices: [...state.editedSlices, summary.edited].sort((a, b) => a - b),
    suggestedSlice: summary.suggested,
    overlays: { ...state.overlays, refined: true, provenance: true },
  };
}

export function setBrushSize(state: ViewState, size: number): ViewState {
  return { ...state, brushSize: Math.min(Math.max(size, 1), 8) };
}

export function jumpToSlice(state: ViewState, axialIndex: number): ViewState {
  return setIndex({ ...state, activePlane: "axial" }, "axial", axialIndex);
}
