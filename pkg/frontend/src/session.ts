/**
 * Whole-session flow: create or resume, run every remaining trial in
 * server order, then show the completion screen. A reload lands back here
 * and picks up from the server-side cursor.
 */

import type { StudyApi } from "./api.js";
import { setBanner, setChoicesEnabled, setProgress, StudyUi } from "./dom.js";
import { ClientSessionState } from "./state.js";
import { runTrial, TrialAbortError, TrialDeps } from "./trial.js";

export interface SessionDeps extends Omit<TrialDeps, "api" | "ui"> {
  api: StudyApi;
  ui: StudyUi;
}

export async function runSession(
  deps: SessionDeps,
  algorithm: string,
  token: string,
): Promise<ClientSessionState> {
  const { api, ui } = deps;
  const descriptor = await api.createSession(algorithm, token);
  const state = new ClientSessionState(descriptor);

  if (descriptor.completed) {
    finishScreen(ui);
    return state;
  }

  ui.status.textContent =
    state.cursor > 0 ? `Resuming at trial ${state.cursor + 1}.` : "";

  try {
    while (!state.done) {
      const trial = await api.getTrial(state.id, state.cursor);
      await runTrial(deps, state, trial);
    }
  } catch (err) {
    if (err instanceof TrialAbortError) {
      setChoicesEnabled(ui, false);
      setBanner(ui, `Session aborted: ${err.message}`, "error");
      ui.status.textContent = "Please contact the study organizers.";
      throw err;
    }
    throw err;
  }

  finishScreen(ui);
  return state;
}

function finishScreen(ui: StudyUi): void {
  setChoicesEnabled(ui, false);
  ui.leftImg.style.visibility = "hidden";
  ui.rightImg.style.visibility = "hidden";
  setProgressDone(ui);
  setBanner(ui, "All done. Thank you for participating!", "done");
}

function setProgressDone(ui: StudyUi): void {
  ui.progress.textContent = "Session complete";
}
