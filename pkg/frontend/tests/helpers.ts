import type { NextCase, Packet } from "../src/types.js";

export function samplePacket(overrides: Partial<Packet> = {}): Packet {
  return {
    token: "tok-abc123",
    demographics: { age_years: 67, sex: "F", race: "white" },
    labs: [
      {
        name: "LAB:glucose", unit: "mg/dL", range_low: 70, range_high: 110,
        count: 3, min: 101.2, max: 149.8, median: 120.5,
        n_high: 2, n_normal: 1, n_low: 0, delta: 20.1,
      },
      {
        name: "LAB:hba1c", unit: "%", range_low: 4, range_high: 5.7,
        count: 1, min: 7.9, max: 7.9, median: 7.9,
        n_high: 1, n_normal: 0, n_low: 0, delta: 0,
      },
      {
        name: "LAB:sodium", unit: "mmol/L", range_low: 135, range_high: 145,
        count: 2, min: 138.0, max: 141.0, median: 139.5,
        n_high: 0, n_normal: 2, n_low: 0, delta: 3.0,
      },
    ],
    meds: ["RX:metformin", "RX:aspirin"],
    observations: ["OBS:bmi_obese"],
    history: { n_prior_encounters: 2, prior_codes: ["I10", "E78.5"], prior_diabetes_coded: true },
    ...overrides,
  };
}

export function nextCase(packet: Packet, position = 1, total = 120): NextCase {
  return { packet, position, total };
}

export function pressKey(doc: Document, key: string): void {
  doc.dispatchEvent(new KeyboardEvent("keydown", { key, bubbles: true }));
}

/** Full-DOM blinding scan: forbidden words, probability-shaped values bound
 * from the API, and diabetes code strings. */
export function scanDomForLeaks(
  root: HTMLElement,
  pValues: number[],
  diabetesCodes: string[],
): string[] {
  const text = root.ownerDocument.body.textContent ?? "";
  const html = root.outerHTML;
  const findings: string[] = [];
  if (/probabilit/i.test(text) || /probabilit/i.test(html)) {
    findings.push("the word 'probability' appears");
  }
  for (const p of pValues) {
    const needle = p.toFixed(3);
    if (text.includes(needle) || html.includes(needle)) {
      findings.push(`probability value ${needle} appears`);
    }
  }
  for (const code of diabetesCodes) {
    if (text.includes(code)) findings.push(`diabetes code ${code} appears`);
  }
  return findings;
}

export const DIABETES_CODES = [
  "250.00", "250.01", "250.02", "250.40", "250.50", "250.60", "250.70", "250.80",
  "E10.9", "E10.65", "E11.9", "E11.65", "E11.40", "E11.22", "E13.9", "O24.419",
];
