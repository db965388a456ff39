// Run-length mask codec matching the server wire format: row-major runs
// starting with a (possibly zero) background run, little-endian uint32
// counts, base64-wrapped, with the (h, w) shape echoed.

export interface RlePayload {
  h: number;
  w: number;
  counts_b64: string;
}

export function rleEncode(mask: Uint8Array, h: number, w: number): RlePayload {
  if (mask.length !== h * w) {
    throw new Error(`mask length ${mask.length} does not match ${h}x${w}`);
  }
  const counts: number[] = [];
  let runValue = 0;
  let runLen = 0;
  for (let i = 0; i < mask.length; i++) {
    const v = mask[i] ? 1 : 0;
    if (v === runValue) {
      runLen++;
    } else {
      counts.push(runLen);
      runValue = v;
      runLen = 1;
    }
  }
  counts.push(runLen);
  const bytes = new Uint8Array(counts.length * 4);
  const view = new DataView(bytes.buffer);
  counts.forEach((c, i) => view.setUint32(i * 4, c, true));
  return { h, w, counts_b64: bytesToBase64(bytes) };
}

export function rleDecode(payload: RlePayload): Uint8Array {
  const { h, w } = payload;
  const bytes = base64ToBytes(payload.counts_b64);
  if (bytes.length % 4 !== 0) {
    throw new Error("counts payload is not a uint32 array");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const mask = new Uint8Array(h * w);
  let pos = 0;
  let value = 0;
  for (let i = 0; i < bytes.length / 4; i++) {
    const run = view.getUint32(i * 4, true);
    if (value) mask.fill(1, pos, pos + run);
    pos += run;
    value = value ? 0 : 1;
  }
  if (pos !== h * w) {
    throw new Error(`run lengths sum to ${pos}, expected ${h * w}`);
  }
  return mask;
}

function bytesToBase64(bytes: Uint8Array): string {
  if (typeof btoa === "function") {
    let bin = "";
    bytes.forEach((b) => (bin += String.fromCharCode(b)));
    return btoa(bin);
  }
  return Buffer.from(bytes).toString("base64");
}

function base64ToBytes(b64: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(b64);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  return new Uint8Array(Buffer.from(b64, "base64"));
}
