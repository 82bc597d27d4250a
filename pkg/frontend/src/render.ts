import type { Confidence, NextCase, Packet, Verdict } from "./types.js";

const LAB_COLUMNS: Array<[keyof Packet["labs"][number], string]> = [
  ["count", "ordered"],
  ["min", "min"],
  ["max", "max"],
  ["median", "median"],
  ["n_high", "high"],
  ["n_normal", "normal"],
  ["n_low", "low"],
  ["delta", "delta"],
];

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

export interface VerdictFormHandle {
  verdict: Verdict | null;
  confidence: Confidence | null;
  readonly submitButton: HTMLButtonElement;
  setVerdict(v: Verdict): void;
  setConfidence(c: Confidence): void;
  canSubmit(): boolean;
}

/** Renders the verdict + confidence form; submit stays disabled until both
 * selections are made. */
export function renderVerdictForm(
  doc: Document,
  container: HTMLElement,
  onSubmit: () => void,
): VerdictFormHandle {
  const form = el(doc, "section", "verdict-form");
  const handle: VerdictFormHandle = {
    verdict: null,
    confidence: null,
    submitButton: el(doc, "button", "submit"),
    setVerdict(v) {
      handle.verdict = v;
      for (const b of verdictButtons) b.classList.toggle("selected", b.dataset.value === v);
      sync();
    },
    setConfidence(c) {
      handle.confidence = c;
      for (const b of confButtons) b.classList.toggle("selected", b.dataset.value === c);
      sync();
    },
    canSubmit() {
      return handle.verdict !== null && handle.confidence !== null;
    },
  };

  const verdictRow = el(doc, "div", "choice-row verdict-row");
  verdictRow.append(el(doc, "span", "label", "Verdict (y/n):"));
  const verdictButtons = (["diabetic", "not_diabetic"] as Verdict[]).map((v) => {
    const button = el(doc, "button", "choice verdict", v === "diabetic" ? "Diabetic (y)" : "Not diabetic (n)");
    button.dataset.value = v;
    button.addEventListener("click", () => handle.setVerdict(v));
    verdictRow.append(button);
    return button;
  });

  const confRow = el(doc, "div", "choice-row confidence-row");
  confRow.append(el(doc, "span", "label", "Your confidence (h/l):"));
  const confButtons = (["high", "low"] as Confidence[]).map((c) => {
    const button = el(doc, "button", "choice confidence", c === "high" ? "High (h)" : "Low (l)");
    button.dataset.value = c;
    button.addEventListener("click", () => handle.setConfidence(c));
    confRow.append(button);
    return button;
  });

  handle.submitButton.textContent = "Submit (Enter)";
  handle.submitButton.disabled = true;
  handle.submitButton.addEventListener("click", () => {
    if (handle.canSubmit()) onSubmit();
  });

  function sync() {
    handle.submitButton.disabled = !handle.canSubmit();
  }

  form.append(verdictRow, confRow, handle.submitButton);
  container.append(form);
  return handle;
}

/** Full packet view: demographics, lab table, meds, observations, history. */
export function renderPacket(
  doc: Document,
  root: HTMLElement,
  next: NextCase,
  unsentCount: number,
  onSubmit: () => void,
): VerdictFormHandle {
  const packet = next.packet;
  root.replaceChildren();

  const header = el(doc, "header", "status-bar");
  header.append(el(doc, "span", "progress", `Case ${next.position} of ${next.total}`));
  if (unsentCount > 0) {
    header.append(el(doc, "span", "unsent-badge", `${unsentCount} unsent`));
  }
  root.append(header);

  const demo = el(doc, "section", "demographics");
  demo.append(el(doc, "h2", undefined, "Patient"));
  const dl = el(doc, "dl");
  const demoFields: Array<[string, string]> = [
    ["Age", String(packet.demographics.age_years)],
    ["Sex", packet.demographics.sex],
    ["Race", packet.demographics.race],
  ];
  for (const [k, v] of demoFields) {
    dl.append(el(doc, "dt", undefined, k), el(doc, "dd", undefined, v));
  }
  demo.append(dl);
  root.append(demo);

  const labs = el(doc, "section", "labs");
  labs.append(el(doc, "h2", undefined, "Lab results (this encounter)"));
  if (packet.labs.length === 0) {
    labs.append(el(doc, "p", "empty", "No labs ordered."));
  } else {
    const table = el(doc, "table", "lab-table");
    const thead = el(doc, "thead");
    const headRow = el(doc, "tr");
    headRow.append(el(doc, "th", undefined, "test"), el(doc, "th", undefined, "unit"),
      el(doc, "th", undefined, "reference"));
    for (const [, label] of LAB_COLUMNS) headRow.append(el(doc, "th", undefined, label));
    thead.append(headRow);
    const tbody = el(doc, "tbody");
    for (const lab of packet.labs) {
      const row = el(doc, "tr", "lab-row");
      const reference =
        lab.range_low !== null && lab.range_high !== null
          ? `${lab.range_low}–${lab.range_high}`
          : "n/a";
      row.append(el(doc, "td", undefined, lab.name), el(doc, "td", undefined, lab.unit),
        el(doc, "td", undefined, reference));
      for (const [field] of LAB_COLUMNS) {
        row.append(el(doc, "td", "num", String(lab[field])));
      }
      tbody.append(row);
    }
    table.append(thead, tbody);
    labs.append(table);
  }
  root.append(labs);

  const meds = el(doc, "section", "medications");
  meds.append(el(doc, "h2", undefined, "Medications"));
  const medList = el(doc, "ul");
  if (packet.meds.length === 0) medList.append(el(doc, "li", "empty", "none recorded"));
  for (const med of packet.meds) medList.append(el(doc, "li", undefined, med));
  meds.append(medList);
  root.append(meds);

  if (packet.observations.length > 0) {
    const obs = el(doc, "section", "observations");
    obs.append(el(doc, "h2", undefined, "Observations"));
    const obsList = el(doc, "ul");
    for (const o of packet.observations) obsList.append(el(doc, "li", undefined, o));
    obs.append(obsList);
    root.append(obs);
  }

  const history = el(doc, "section", "history");
  history.append(el(doc, "h2", undefined, "Prior encounters"));
  const h = packet.history;
  history.append(el(doc, "p", undefined, `${h.n_prior_encounters} prior encounter(s) on record.`));
  history.append(el(doc, "p", undefined,
    `Previously coded for the target condition: ${h.prior_diabetes_coded ? "yes" : "no"}`));
  if (h.prior_codes.length > 0) {
    const codeList = el(doc, "ul", "prior-codes");
    for (const code of h.prior_codes) codeList.append(el(doc, "li", undefined, code));
    history.append(codeList);
  }
  root.append(history);

  return renderVerdictForm(doc, root, onSubmit);
}

export function renderDone(doc: Document, root: HTMLElement, total: number): void {
  root.replaceChildren();
  const done = el(doc, "section", "done-screen");
  done.append(el(doc, "h2", undefined, "Queue complete"));
  done.append(el(doc, "p", undefined, `All ${total} assigned cases are judged. Thank you.`));
  const submit = el(doc, "button", "submit");
  submit.textContent = "Submit (Enter)";
  submit.disabled = true;
  done.append(submit);
  root.append(done);
}

export function renderBanner(doc: Document, root: HTMLElement, message: string): void {
  const existing = root.querySelector(".banner");
  if (existing) existing.remove();
  const banner = el(doc, "div", "banner", message);
  root.prepend(banner);
}

export function clearBanner(root: HTMLElement): void {
  root.querySelector(".banner")?.remove();
}
