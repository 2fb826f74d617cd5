/** DOM rendering for the annotation screen: channel tiles, composite,
 * entropy badge, progress bar, and the final metrics card. */

import { QueryPayload } from "./api.js";
import { SessionView } from "./session.js";

export interface ViewCallbacks {
  onLabel: (sampleId: number, label: 0 | 1) => void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function renderQuery(
  doc: Document,
  query: QueryPayload,
  labelNames: Record<string, string>,
  callbacks: ViewCallbacks,
): HTMLElement {
  const card = el(doc, "article", "query-card");
  card.dataset.sampleId = String(query.sample_id);

  const header = el(doc, "header", "query-header");
  header.appendChild(el(doc, "span", "sample-id", `sample #${query.sample_id}`));
  const badge = el(
    doc,
    "span",
    "entropy-badge",
    query.entropy === null
      ? "seed round"
      : `entropy ${query.entropy.toFixed(3)}`,
  );
  header.appendChild(badge);
  card.appendChild(header);

  const composite = el(doc, "img", "composite") as HTMLImageElement;
  composite.src = `data:image/png;base64,${query.composite_png_base64}`;
  composite.alt = `composite of channels ${query.composite_channels.join(", ")}`;
  card.appendChild(composite);

  const strip = el(doc, "div", "channel-strip");
  for (const channel of query.channels) {
    const tile = el(doc, "figure", "channel-tile");
    const img = el(doc, "img") as HTMLImageElement;
    img.src = `data:image/png;base64,${channel.png_base64}`;
    img.alt = channel.name;
    tile.appendChild(img);
    tile.appendChild(el(doc, "figcaption", undefined, channel.name));
    strip.appendChild(tile);
  }
  card.appendChild(strip);

  const buttons = el(doc, "div", "label-buttons");
  for (const label of [0, 1] as const) {
    const btn = el(
      doc,
      "button",
      `label-btn label-${label}`,
      `${label} — ${labelNames[String(label)] ?? label}`,
    );
    btn.addEventListener("click", () =>
      callbacks.onLabel(query.sample_id, label),
    );
    buttons.appendChild(btn);
  }
  card.appendChild(buttons);
  return card;
}

export function renderView(
  root: HTMLElement,
  view: SessionView,
  labelNames: Record<string, string>,
  callbacks: ViewCallbacks,
): void {
  const doc = root.ownerDocument;
  root.textContent = "";

  const banner = el(doc, "div", "error-banner");
  banner.hidden = view.error === null;
  banner.textContent = view.error ?? "";
  root.appendChild(banner);

  if (view.progress) {
    const { labeled, budget } = view.progress;
    root.appendChild(
      el(doc, "div", "progress", `${labeled} / ${budget} labels`),
    );
  }

  if (view.phase === "done") {
    const card = el(doc, "section", "metrics-card");
    card.appendChild(el(doc, "h2", undefined, "Session complete"));
    if (view.metrics) {
      card.appendChild(
        el(
          doc,
          "p",
          "metrics",
          `accuracy ${view.metrics.accuracy.toFixed(4)} after ` +
            `${view.metrics.labeled} labels in ${view.metrics.rounds} rounds`,
        ),
      );
    }
    root.appendChild(card);
    return;
  }

  if (view.phase === "adapting" || view.queue.length === 0) {
    root.appendChild(
      el(doc, "div", "adapting", "model is adapting — fetching next queries…"),
    );
    return;
  }

  const list = el(doc, "div", "query-list");
  for (const query of view.queue) {
    list.appendChild(renderQuery(doc, query, labelNames, callbacks));
  }
  root.appendChild(list);
  root.appendChild(
    el(
      doc,
      "p",
      "hint",
      "press 0 or 1 to label the first card; click a button to label any card",
    ),
  );
}

/** Keyboard shortcut handler: 0/1 label the first query in the queue. */
export function attachKeyboard(
  doc: Document,
  getView: () => SessionView,
  callbacks: ViewCallbacks,
): () => void {
  const handler = (event: KeyboardEvent) => {
    if (event.key !== "0" && event.key !== "1") return;
    const view = getView();
    const first = view.queue[0];
    if (view.phase !== "labeling" || first === undefined) return;
    callbacks.onLabel(first.sample_id, event.key === "1" ? 1 : 0);
  };
  doc.addEventListener("keydown", handler);
  return () => doc.removeEventListener("keydown", handler);
}
