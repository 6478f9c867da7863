/**
 * DOM scaffold for the study page.
 *
 * The client renders only fields present in server payloads; nothing in the
 * tree ever encodes which side is fake (the server never sends it). Images
 * are blanked by toggling visibility, never removed, so the choice targets
 * keep their layout.
 */

export interface StudyUi {
  root: HTMLElement;
  leftImg: HTMLImageElement;
  rightImg: HTMLImageElement;
  leftBtn: HTMLButtonElement;
  rightBtn: HTMLButtonElement;
  banner: HTMLElement;
  progress: HTMLElement;
  status: HTMLElement;
}

export function buildUi(doc: Document, mount: HTMLElement): StudyUi {
  mount.innerHTML = "";
  const root = doc.createElement("div");
  root.className = "study";

  const progress = doc.createElement("div");
  progress.className = "progress";

  const pair = doc.createElement("div");
  pair.className = "pair";
  const leftImg = doc.createElement("img");
  leftImg.className = "stimulus left";
  leftImg.alt = "left photo";
  const rightImg = doc.createElement("img");
  rightImg.className = "stimulus right";
  rightImg.alt = "right photo";
  pair.append(leftImg, rightImg);

  const buttons = doc.createElement("div");
  buttons.className = "choices";
  const leftBtn = doc.createElement("button");
  leftBtn.textContent = "Left photo is fake";
  leftBtn.disabled = true;
  const rightBtn = doc.createElement("button");
  rightBtn.textContent = "Right photo is fake";
  rightBtn.disabled = true;
  buttons.append(leftBtn, rightBtn);

  const banner = doc.createElement("div");
  banner.className = "banner";

  const status = doc.createElement("div");
  status.className = "status";

  root.append(progress, pair, buttons, banner, status);
  mount.append(root);
  return { root, leftImg, rightImg, leftBtn, rightBtn, banner, progress, status };
}

export function showPair(ui: StudyUi, left: string, right: string): void {
  ui.leftImg.src = left;
  ui.rightImg.src = right;
  ui.leftImg.style.visibility = "visible";
  ui.rightImg.style.visibility = "visible";
}

/** Hide the stimuli without removing them (no layout shift). */
export function blankPair(ui: StudyUi): void {
  ui.leftImg.style.visibility = "hidden";
  ui.rightImg.style.visibility = "hidden";
}

export function setChoicesEnabled(ui: StudyUi, enabled: boolean): void {
  ui.leftBtn.disabled = !enabled;
  ui.rightBtn.disabled = !enabled;
}

export function setBanner(ui: StudyUi, text: string, kind = ""): void {
  ui.banner.textContent = text;
  ui.banner.dataset.kind = kind;
}

export function setProgress(ui: StudyUi, index: number, total: number,
                            phase: string): void {
  ui.progress.textContent = `Trial ${index + 1} / ${total} (${phase})`;
}
