/**
 * One forced-choice trial: preload, timed exposure, blank, choice, submit.
 *
 * Both stimuli are fully preloaded before the exposure clock starts, so
 * network latency never eats into display time. Choice controls stay
 * disabled until the exposure completes; the first input disables them again
 * immediately, making double submission impossible at the UI layer.
 */

import type { ChoiceReply, Side, StudyApi, TrialPayload } from "./api.js";
import {
  blankPair,
  setBanner,
  setChoicesEnabled,
  setProgress,
  showPair,
  StudyUi,
} from "./dom.js";
import type { ClientSessionState } from "./state.js";

export class TrialAbortError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "TrialAbortError";
  }
}

export interface TrialDeps {
  api: StudyApi;
  ui: StudyUi;
  doc: Document;
  preload: (url: string) => Promise<void>;
  now: () => number;
  schedule: (fn: () => void, ms: number) => void;
}

async function preloadWithRetry(deps: TrialDeps, url: string): Promise<void> {
  try {
    await deps.preload(url);
  } catch {
    try {
      await deps.preload(url);
    } catch (err) {
      throw new TrialAbortError(
        `could not load stimulus ${url}: ${(err as Error).message}`,
      );
    }
  }
}

function waitForChoice(deps: TrialDeps): Promise<Side> {
  const { ui, doc } = deps;
  return new Promise<Side>((resolve) => {
    const finish = (side: Side) => {
      setChoicesEnabled(ui, false);
      ui.leftBtn.removeEventListener("click", onLeft);
      ui.rightBtn.removeEventListener("click", onRight);
      doc.removeEventListener("keyup", onKey);
      resolve(side);
    };
    const onLeft = () => finish("left");
    const onRight = () => finish("right");
    const onKey = (ev: KeyboardEvent) => {
      if (ev.key === "ArrowLeft") finish("left");
      else if (ev.key === "ArrowRight") finish("right");
    };
    ui.leftBtn.addEventListener("click", onLeft);
    ui.rightBtn.addEventListener("click", onRight);
    doc.addEventListener("keyup", onKey);
  });
}

export async function runTrial(
  deps: TrialDeps,
  state: ClientSessionState,
  trial: TrialPayload,
): Promise<ChoiceReply> {
  const { ui, api } = deps;

  await preloadWithRetry(deps, trial.left);
  await preloadWithRetry(deps, trial.right);

  setProgress(ui, trial.index, state.total, trial.phase);
  setBanner(ui, "");
  setChoicesEnabled(ui, false);
  showPair(ui, trial.left, trial.right);

  await new Promise<void>((resolve) => deps.schedule(resolve, trial.exposure_ms));

  blankPair(ui);
  setChoicesEnabled(ui, true);
  const enabledAt = deps.now();

  const side = await waitForChoice(deps);
  const responseMs = Math.round(deps.now() - enabledAt);

  const reply = await api.submitChoice(state.id, trial.index, side, responseMs);
  state.markSubmitted(trial.index);

  if (reply.phase === "practice") {
    setBanner(ui, reply.correct ? "Correct!" : "Incorrect.",
              reply.correct ? "good" : "bad");
  }
  return reply;
}
