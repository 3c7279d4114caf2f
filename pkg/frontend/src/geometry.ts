/**
 * Rectangle math for the ROI editor, kept free of DOM so it can be
 * tested directly. Rects are canonical-frame pixels, x/y top-left.
 */

export interface Rect {
  x: number;
  y: number;
  w: number;
  h: number;
}

export type Handle = "nw" | "ne" | "sw" | "se";

export const HANDLES: Handle[] = ["nw", "ne", "sw", "se"];

/** Flip negative width/height so x/y is always the top-left corner. */
export function normalize(r: Rect): Rect {
  const x = r.w < 0 ? r.x + r.w : r.x;
  const y = r.h < 0 ? r.y + r.h : r.y;
  return { x, y, w: Math.abs(r.w), h: Math.abs(r.h) };
}

export function contains(r: Rect, x: number, y: number): boolean {
  return x >= r.x && x <= r.x + r.w && y >= r.y && y <= r.y + r.h;
}

export function handlePosition(r: Rect, handle: Handle): [number, number] {
  switch (handle) {
    case "nw":
      return [r.x, r.y];
    case "ne":
      return [r.x + r.w, r.y];
    case "sw":
      return [r.x, r.y + r.h];
    case "se":
      return [r.x + r.w, r.y + r.h];
  }
}

/** The corner handle within tol px of (x, y), if any. */
export function hitHandle(r: Rect, x: number, y: number, tol: number): Handle | null {
  for (const handle of HANDLES) {
    const [hx, hy] = handlePosition(r, handle);
    if (Math.abs(x - hx) <= tol && Math.abs(y - hy) <= tol) {
      return handle;
    }
  }
  return null;
}

/**
 * Drag one corner to (x, y); the diagonally opposite corner stays put.
 * The result is normalized, so dragging a corner across its opposite
 * simply flips the rectangle instead of producing negative sizes.
 */
export function resizeFromHandle(r: Rect, handle: Handle, x: number, y: number): Rect {
  let anchorX: number;
  let anchorY: number;
  switch (handle) {
    case "nw":
      anchorX = r.x + r.w;
      anchorY = r.y + r.h;
      break;
    case "ne":
      anchorX = r.x;
      anchorY = r.y + r.h;
      break;
    case "sw":
      anchorX = r.x + r.w;
      anchorY = r.y;
      break;
    case "se":
      anchorX = r.x;
      anchorY = r.y;
      break;
  }
  return normalize({ x: anchorX, y: anchorY, w: x - anchorX, h: y - anchorY });
}

export function moveBy(r: Rect, dx: number, dy: number): Rect {
  return { x: r.x + dx, y: r.y + dy, w: r.w, h: r.h };
}

export function roundRect(r: Rect): Rect {
  return {
    x: Math.round(r.x),
    y: Math.round(r.y),
    w: Math.round(r.w),
    h: Math.round(r.h),
  };
}

export function toArray(r: Rect): [number, number, number, number] {
  return [r.x, r.y, r.w, r.h];
}

export function fromArray(a: number[]): Rect {
  return { x: a[0], y: a[1], w: a[2], h: a[3] };
}
