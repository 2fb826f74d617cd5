/** Entry point: create a session against the local service and wire the
 * annotation screen together. */

import { AnnotationClient } from "./api.js";
import { LabelingSession, pollSession } from "./session.js";
import { attachKeyboard, renderView } from "./view.js";

export async function startApp(
  root: HTMLElement,
  baseUrl = "http://127.0.0.1:8321",
): Promise<LabelingSession> {
  const client = new AnnotationClient(baseUrl);
  const params = new URLSearchParams(root.ownerDocument.location?.search ?? "");
  const info = await client.createSession({
    task: Number(params.get("task") ?? 0),
    budget: Number(params.get("budget") ?? 16),
    seed: Number(params.get("seed") ?? 0),
  });
  const session = new LabelingSession(client, info.session_id);

  const callbacks = {
    onLabel: (sampleId: number, label: 0 | 1) => {
      void session.label(sampleId, label).then(() => {
        renderView(root, session.view(), info.label_names, callbacks);
      });
    },
  };

  attachKeyboard(root.ownerDocument, () => session.view(), callbacks);
  const view = await session.refresh();
  renderView(root, view, info.label_names, callbacks);
  pollSession(session, (v) => renderView(root, v, info.label_names, callbacks));
  return session;
}

declare global {
  interface Window {
    startApp?: typeof startApp;
  }
}

if (typeof window !== "undefined") {
  window.startApp = startApp;
  const root = document.getElementById("app");
  if (root) void startApp(root);
}
