/** Browser entry point: mount the UI and run one session. */

import { StudyApi } from "./api.js";
import { buildUi } from "./dom.js";
import { runSession } from "./session.js";

function imagePreloader(): (url: string) => Promise<void> {
  return (url) =>
    new Promise<void>((resolve, reject) => {
      const img = new Image();
      img.onload = () => resolve();
      img.onerror = () => reject(new Error(`failed to load ${url}`));
      img.src = url;
    });
}

export async function boot(doc: Document): Promise<void> {
  const mount = doc.getElementById("app");
  if (!mount) throw new Error("missing #app mount point");
  const params = new URLSearchParams(doc.defaultView!.location.search);
  const algorithm = params.get("algorithm") ?? "full";
  const token = params.get("token") ?? "";
  const ui = buildUi(doc, mount);
  if (!token) {
    ui.banner.textContent = "Missing ?token= in the study link.";
    return;
  }
  const api = new StudyApi("");
  await runSession(
    {
      api,
      ui,
      doc,
      preload: imagePreloader(),
      now: () => performance.now(),
      schedule: (fn, ms) => void setTimeout(fn, ms),
    },
    algorithm,
    token,
  );
}

declare const process: unknown;
if (typeof document !== "undefined" && typeof process === "undefined") {
  void boot(document);
}
