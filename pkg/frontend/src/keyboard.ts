import type { Confidence, Verdict } from "./types.js";

export interface KeyHandlers {
  verdict(v: Verdict): void;
  confidence(c: Confidence): void;
  submit(): void;
}

/** Keyboard-first controls: y/n verdict, h/l confidence, Enter submit. */
export function attachKeyboard(doc: Document, handlers: KeyHandlers): () => void {
  const listener = (event: Event) => {
    const key = (event as KeyboardEvent).key;
    switch (key) {
      case "y":
        handlers.verdict("diabetic");
        break;
      case "n":
        handlers.verdict("not_diabetic");
        break;
      case "h":
        handlers.confidence("high");
        break;
      case "l":
        handlers.confidence("low");
        break;
      case "Enter":
        handlers.submit();
        break;
    }
  };
  doc.addEventListener("keydown", listener);
  return () => doc.removeEventListener("keydown", listener);
}
