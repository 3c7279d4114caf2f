/** Small DOM helpers; no framework, so element creation stays terse. */

export function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  children: (Node | string)[] = [],
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") {
      node.className = value;
    } else {
      node.setAttribute(key, value);
    }
  }
  for (const child of children) {
    node.append(child);
  }
  return node;
}

export function clear(node: HTMLElement): void {
  while (node.firstChild) {
    node.removeChild(node.firstChild);
  }
}

export function fmtDate(epochSeconds: number): string {
  return new Date(epochSeconds * 1000).toISOString().slice(0, 10);
}

/**
 * Render a download link for a produced file. Object URLs are not
 * revoked until the view is torn down so the link stays clickable.
 */
export function downloadLink(blob: Blob, filename: string, text: string): HTMLAnchorElement {
  const a = el("a", { class: "download", download: filename }, [text]);
  a.href = URL.createObjectURL(blob);
  return a;
}
