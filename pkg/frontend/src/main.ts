// Application wiring: session loading, three-plane rendering, mask
// painting, edit submission, and history. All view data comes from the
// API; reloading the page rebuilds the identical view.

import { ApiError, Client } from "./api.js";
import type { Axis, EditResult, HistoryEntry, SessionSummary, SlicePayload } from "./api.js";
import { rleEncode } from "./rle.js";
import {
  Draft,
  hasStrokes,
  newDraft,
  pushStroke,
  rasterize,
  undoStroke,
} from "./raster.js";
import {
  renderDscStrip,
  renderPlane,
  sliceValuesToMask,
  valueRange,
} from "./render.js";
import type { Rgba } from "./render.js";
import {
  ViewState,
  applyEditResult,
  beginEditing,
  cancelEditing,
  initialState,
  jumpToSlice,
  planeExtent,
  refinedAvailable,
  setBrushSize,
  setIndex,
  toggleOverlay,
} from "./state.js";

type Tool = "brush" | "erase" | "polygon";

const PLANES: Axis[] = ["axial", "coronal", "sagittal"];

class App {
  client: Client;
  state!: ViewState;
  draft: Draft | null = null;
  tool: Tool = "brush";
  polygonPoints: Array<[number, number]> = [];
  provenance: string[] | null = null;
  perSliceDsc: number[] | null = null;
  history: HistoryEntry[] = [];
  sliceCache = new Map<string, SlicePayload>();
  submitQueue: Promise<void> = Promise.resolve();
  inFlight = false;

  constructor(private root: HTMLElement, baseUrl: string) {
    this.client = new Client(baseUrl);
  }

  // -- data access ---------------------------------------------------------

  async fetchSlice(variant: "image" | "baseline" | "refined" | "label", axis: Axis, index: number) {
    const key = `${variant}/${axis}/${index}`;
    const hit = this.sliceCache.get(key);
    if (hit) return hit;
    const payload = await this.client.getSlice(this.state.sessionId, variant, axis, index);
    this.sliceCache.set(key, payload);
    return payload;
  }

  invalidateRefined() {
    for (const key of [...this.sliceCache.keys()]) {
      if (key.startsWith("refined/")) this.sliceCache.delete(key);
    }
  }

  async reload(summary: SessionSummary) {
    this.state = initialState(summary);
    const hist = await this.client.history(summary.session_id);
    this.history = hist.edits;
    this.provenance = provenanceFromHistory(this.history, this.state.dims[0]);
    if (summary.has_label) {
      const metrics = await this.client.metrics(summary.session_id);
      this.perSliceDsc = metrics["per_slice_dsc"] as number[];
    }
    await this.refresh();
  }

  // -- editing -------------------------------------------------------------

  startEditing() {
    this.state = beginEditing(this.state);
    const [, h, w] = this.state.dims;
    this.fetchSlice(refinedAvailable(this.state) ? "refined" : "baseline", "axial", this.state.indices.axial)
      .then((slice) => {
        this.draft = newDraft(h, w, sliceValuesToMask(slice.values));
        this.render();
      })
      .catch((err) => this.banner(`could not load slice: ${err.message}`));
  }

  stopEditing() {
    this.state = cancelEditing(this.state);
    this.draft = null;
    this.polygonPoints = [];
    this.render();
  }

  undo() {
    if (this.draft) {
      this.draft = undoStroke(this.draft);
      this.render();
    }
  }

  submit() {
    if (!this.draft || !hasStrokes(this.draft) || this.state.editingSlice === null) return;
    const sliceIndex = this.state.editingSlice;
    const mask = rasterize(this.draft);
    const [, h, w] = this.state.dims;
    const payload = rleEncode(mask, h, w);
    // single in-flight submission; extra submits queue client-side
    this.submitQueue = this.submitQueue.then(async () => {
      this.inFlight = true;
      this.render();
      try {
        const result = await this.client.submitEdit(this.state.sessionId, sliceIndex, payload);
        this.onEditAccepted(result);
      } catch (err) {
        if (err instanceof ApiError && err.code === "duplicate_slice") {
          this.banner(`slice ${sliceIndex} was already edited`, {
            label: "jump to slice",
            action: () => {
              this.state = jumpToSlice(this.state, sliceIndex);
              this.refresh();
            },
          });
        } else {
          this.banner(`edit failed: ${(err as Error).message}`);
        }
      } finally {
        this.inFlight = false;
        this.render();
      }
    });
  }

  onEditAccepted(result: EditResult) {
    this.state = applyEditResult(this.state, {
      edited: result.slice_index,
      suggested: result.suggested_slice ?? null,
    });
    this.draft = null;
    this.polygonPoints = [];
    this.provenance = result.provenance;
    if (result.per_slice_dsc) this.perSliceDsc = result.per_slice_dsc;
    this.history = [
      ...this.history,
      {
        edit_index: result.edit_index,
        slice_index: result.slice_index,
        diverged: result.diverged,
        iterations: result.iterations,
        neighborhood: result.neighborhood,
        dsc_whole: result.dsc_whole_after,
      },
    ];
    this.invalidateRefined();
    const delta =
      result.dsc_whole_after != null && result.dsc_whole_before != null
        ? ` (DSC ${result.dsc_whole_before.toFixed(3)} -> ${result.dsc_whole_after.toFixed(3)})`
        : "";
    this.banner(`edit on slice ${result.slice_index} applied${delta}`, null, "ok");
    this.refresh();
  }

  // -- rendering -----------------------------------------------------------

  async planeBuffer(axis: Axis): Promise<Rgba> {
    const index = this.state.indices[axis];
    const image = await this.fetchSlice("image", axis, index);
    const overlays: Record<string, Uint8Array | null> = {};
    if (this.state.overlays.baseline) {
      overlays.baseline = sliceValuesToMask((await this.fetchSlice("baseline", axis, index)).values);
    }
    if (this.state.overlays.refined && refinedAvailable(this.state)) {
      overlays.refined = sliceValuesToMask((await this.fetchSlice("refined", axis, index)).values);
    }
    if (this.state.overlays.label && this.state.hasLabel) {
      overlays.label = sliceValuesToMask((await this.fetchSlice("label", axis, index)).values);
    }
    if (axis === "axial" && this.draft && this.state.editingSlice === index) {
      overlays.draft = rasterize(this.draft);
    }
    const offAxial = axis !== "axial";
    return renderPlane({
      values: image.values,
      window: valueRange(image.values),
      overlays,
      markerRows: offAxial ? this.state.editedSlices : [],
      provenanceRows:
        offAxial && this.state.overlays.provenance && this.provenance ? this.provenance : null,
      suggestedRow: offAxial ? this.state.suggestedSlice : null,
    });
  }

  async refresh() {
    try {
      const buffers = await Promise.all(PLANES.map((p) => this.planeBuffer(p)));
      PLANES.forEach((p, i) => this.blit(p, buffers[i]));
      this.render();
    } catch (err) {
      this.banner(`network failure, view kept: ${(err as Error).message}`);
    }
  }

  blit(axis: Axis, buf: Rgba) {
    const canvas = this.root.querySelector<HTMLCanvasElement>(`#plane-${axis}`)!;
    const scale = axis === "axial" ? this.state.zoom : Math.max(2, Math.floor(this.state.zoom / 2));
    canvas.width = buf.width * scale;
    canvas.height = buf.height * scale;
    const off = document.createElement("canvas");
    off.width = buf.width;
    off.height = buf.height;
    off.getContext("2d")!.putImageData(new ImageData(buf.data, buf.width, buf.height), 0, 0);
    const ctx = canvas.getContext("2d")!;
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  }

  banner(message: string, action: { label: string; action: () => void } | null = null, kind = "warn") {
    const el = this.root.querySelector<HTMLDivElement>("#banner")!;
    el.className = `banner ${kind}`;
    el.textContent = message;
    if (action) {
      const btn = document.createElement("button");
      btn.textContent = action.label;
      btn.onclick = action.action;
      el.appendChild(btn);
    }
    el.style.display = "block";
  }

  render() {
    const s = this.state;
    const $ = <T extends HTMLElement>(sel: string) => this.root.querySelector<T>(sel)!;
    $("#session-label").textContent = `session ${s.sessionId}`;
    PLANES.forEach((p) => {
      const slider = $(`#slider-${p}`) as HTMLInputElement;
      slider.max = String(planeExtent(s.dims, p) - 1);
      slider.value = String(s.indices[p]);
      $(`#index-${p}`).textContent = `${s.indices[p]}`;
    });
    (["baseline", "refined", "label", "provenance"] as const).forEach((key) => {
      const box = $(`#toggle-${key}`) as HTMLInputElement;
      box.checked = s.overlays[key];
      box.disabled =
        (key === "refined" && !refinedAvailable(s)) ||
        (key === "label" && !s.hasLabel) ||
        (key === "provenance" && !this.provenance);
    });
    const badge = $("#suggested-badge");
    if (s.suggestedSlice !== null) {
      badge.style.display = "inline-block";
      badge.textContent = `suggested worst slice: ${s.suggestedSlice}`;
    } else {
      badge.style.display = "none";
    }
    const editing = s.editingSlice !== null;
    ($("#btn-edit") as HTMLButtonElement).disabled = editing;
    ($("#btn-cancel") as HTMLButtonElement).disabled = !editing;
    ($("#btn-undo") as HTMLButtonElement).disabled = !this.draft || !hasStrokes(this.draft);
    ($("#btn-submit") as HTMLButtonElement).disabled =
      !editing || !this.draft || !hasStrokes(this.draft) || this.inFlight;
    $("#edit-status").textContent = editing
      ? `editing axial slice ${s.editingSlice}${this.inFlight ? " (submitting...)" : ""}`
      : "review mode";
    const list = $("#history-list");
    list.innerHTML = "";
    for (const entry of this.history) {
      const li = document.createElement("li");
      const dscPart = entry.dsc_whole != null ? ` DSC ${entry.dsc_whole.toFixed(3)}` : "";
      li.textContent = `#${entry.edit_index} slice ${entry.slice_index}, ${entry.iterations} iters${dscPart}${entry.diverged ? " [diverged]" : ""}`;
      list.appendChild(li);
    }
    if (this.perSliceDsc) {
      const strip = renderDscStrip(this.perSliceDsc, s.editedSlices);
      const canvas = $("#dsc-strip") as HTMLCanvasElement;
      canvas.width = strip.width;
      canvas.height = strip.height;
      canvas.getContext("2d")!.putImageData(new ImageData(strip.data, strip.width, strip.height), 0, 0);
      canvas.style.display = "block";
    }
  }

  // -- pointer handling on the axial canvas -----------------------------------

  canvasToPixel(canvas: HTMLCanvasElement, ev: MouseEvent): [number, number] {
    const rect = canvas.getBoundingClientRect();
    const [, h, w] = this.state.dims;
    const x = ((ev.clientX - rect.left) / rect.width) * w;
    const y = ((ev.clientY - rect.top) / rect.height) * h;
    return [y, x];
  }

  bindEditor() {
    const canvas = this.root.querySelector<HTMLCanvasElement>("#plane-axial")!;
    let current: Array<[number, number]> | null = null;
    canvas.addEventListener("mousedown", (ev) => {
      if (!this.draft || this.state.editingSlice === null) return;
      const pt = this.canvasToPixel(canvas, ev);
      if (this.tool === "polygon") {
        this.polygonPoints.push(pt);
        return;
      }
      current = [pt];
    });
    canvas.addEventListener("mousemove", (ev) => {
      if (current) current.push(this.canvasToPixel(canvas, ev));
    });
    const finish = () => {
      if (current && this.draft) {
        this.draft = pushStroke(this.draft, {
          kind: this.tool === "erase" ? "erase" : "brush",
          points: current,
          radius: this.state.brushSize,
        });
        this.refresh();
      }
      current = null;
    };
    canvas.addEventListener("mouseup", finish);
    canvas.addEventListener("mouseleave", finish);
    canvas.addEventListener("dblclick", () => {
      if (this.tool === "polygon" && this.draft && this.polygonPoints.length >= 3) {
        this.draft = pushStroke(this.draft, { kind: "polygon", vertices: [...this.polygonPoints] });
        this.polygonPoints = [];
        this.refresh();
      }
    });
  }

  bindControls() {
    const $ = <T extends HTMLElement>(sel: string) => this.root.querySelector<T>(sel)!;
    PLANES.forEach((p) => {
      ($(`#slider-${p}`) as HTMLInputElement).addEventListener("input", (ev) => {
        const value = Number((ev.target as HTMLInputElement).value);
        if (p === "axial" && this.state.editingSlice !== null) return; // one editing slice at a time
        this.state = setIndex(this.state, p, value);
        this.refresh();
      });
    });
    (["baseline", "refined", "label", "provenance"] as const).forEach((key) => {
      ($(`#toggle-${key}`) as HTMLInputElement).addEventListener("change", () => {
        this.state = toggleOverlay(this.state, key);
        this.refresh();
      });
    });
    ($("#brush-size") as HTMLInputElement).addEventListener("input", (ev) => {
      this.state = setBrushSize(this.state, Number((ev.target as HTMLInputElement).value));
    });
    ($("#tool") as HTMLSelectElement).addEventListener("change", (ev) => {
      this.tool = (ev.target as HTMLSelectElement).value as Tool;
    });
    $("#btn-edit").addEventListener("click", () => this.startEditing());
    $("#btn-cancel").addEventListener("click", () => this.stopEditing());
    $("#btn-undo").addEventListener("click", () => this.undo());
    $("#btn-submit").addEventListener("click", () => this.submit());
    $("#btn-goto-suggested").addEventListener("click", () => {
      if (this.state.suggestedSlice !== null) {
        this.state = jumpToSlice(this.state, this.state.suggestedSlice);
        this.refresh();
      }
    });
  }
}

export function provenanceFromHistory(entries: HistoryEntry[], depth: number): string[] | null {
  if (!entries.length) return null;
  const tags = new Array<string>(depth).fill("farther");
  for (const entry of entries) {
    for (const s of entry.neighborhood) tags[s] = `neighbor:${entry.edit_index}`;
  }
  return tags;
}

export async function boot(root: HTMLElement): Promise<App> {
  const params = new URLSearchParams(window.location.search);
  const api = params.get("api") ?? "";
  const app = new App(root, api);
  app.bindControls();
  app.bindEditor();
  const sessionId = params.get("session");
  if (sessionId) {
    const summary = await app.client.getSession(sessionId);
    await app.reload(summary);
  } else {
    const form = root.querySelector<HTMLFormElement>("#create-form")!;
    form.style.display = "block";
    const health = await app.client.health();
    const select = root.querySelector<HTMLSelectElement>("#model-select")!;
    health.models.forEach((m) => {
      const opt = document.createElement("option");
      opt.value = m;
      opt.textContent = m;
      select.appendChild(opt);
    });
    form.addEventListener("submit", async (ev) => {
      ev.preventDefault();
      const body: Record<string, unknown> = {
        model_id: select.value,
        volume_path: (root.querySelector<HTMLInputElement>("#volume-path")!).value,
      };
      const label = (root.querySelector<HTMLInputElement>("#label-path")!).value;
      if (label) body.label_path = label;
      try {
        const summary = await app.client.createSession(body);
        window.location.search = `?session=${summary.session_id}${api ? `&api=${api}` : ""}`;
      } catch (err) {
        app.banner(`create failed: ${(err as Error).message}`);
      }
    });
  }
  return app;
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  boot(document.getElementById("app")!).catch((err) => {
    console.error(err);
    const el = document.getElementById("banner");
    if (el) {
      el.textContent = String(err);
      el.style.display = "block";
    }
  });
}
