/**
 * Console end-to-end against the real review service.
 *
 * A fixture script builds 120 blinded packets (3 bins x 40, 20 per
 * direction); the actual Python server is spawned on a local port; a
 * scripted reviewer session drives the console through every packet with
 * keyboard events, running a full-DOM blinding scan on each rendered packet.
 */

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ReviewApi } from "../src/api.js";
import { ConsoleApp } from "../src/app.js";
import { pressKey, scanDomForLeaks, DIABETES_CODES } from "./helpers.js";

const PORT = 8461;
const BASE = `http://127.0.0.1:${PORT}`;

let server: ChildProcess | null = null;
let fixtureDir: string;
let meta: {
  n_packets: number;
  reviewer_token: string;
  p_by_token: Record<string, number>;
  bin_by_token: Record<string, string>;
};

async function waitForHealth(timeoutMs = 30_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const response = await fetch(`${BASE}/health`);
      if (response.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 250));
  }
  throw new Error("review service did not come up");
}

beforeAll(async () => {
  fixtureDir = mkdtempSync(join(tmpdir(), "review-e2e-"));
  const fixture = spawnSync(
    "python3",
    [join(__dirname, "..", "scripts", "make_review_fixture.py"),
      "--out", fixtureDir, "--port", String(PORT)],
    { encoding: "utf-8" },
  );
  if (fixture.status !== 0) {
    throw new Error(`fixture generation failed:\n${fixture.stderr}`);
  }
  console.log("[e2e] fixture:", fixture.stdout.trim(), "dir:", fixtureDir);
  meta = JSON.parse(readFileSync(join(fixtureDir, "fixture_meta.json"), "utf-8"));
  server = spawn(
    "python3",
    ["-m", "phenoaudit.cli", "serve", "--config", join(fixtureDir, "server.json")],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  server.stderr?.on("data", (chunk) => console.error("[server]", String(chunk).trim()));
  server.stdout?.on("data", (chunk) => console.log("[server]", String(chunk).trim()));
  await waitForHealth();
}, 120_000);

afterAll(() => {
  server?.kill("SIGTERM");
});

describe("scripted reviewer session", () => {
  it("completes all 120 packets with a clean blinding scan on every one", async () => {
    expect(meta.n_packets).toBe(120);
    const pValues = Object.values(meta.p_by_token);

    document.body.innerHTML = "<div id='app'></div>";
    localStorage.clear();
    const root = document.getElementById("app")!;
    const api = new ReviewApi(BASE, meta.reviewer_token);
    const app = new ConsoleApp({ root, api, doc: document, storage: localStorage });
    await app.start();

    const seenTokens = new Set<string>();
    let scannedPackets = 0;
    for (let i = 0; i < meta.n_packets; i++) {
      const progress = root.querySelector(".progress");
      expect(progress, `packet ${i + 1} should be on screen`).not.toBeNull();

      // one-packet invariant: exactly one verdict form at a time
      expect(root.querySelectorAll(".verdict-form").length).toBe(1);

      const leaks = scanDomForLeaks(root, pValues, DIABETES_CODES);
      expect(leaks, `blinding scan on packet ${i + 1}`).toEqual([]);
      scannedPackets += 1;

      // alternate verdicts and confidences like a real reviewer would
      pressKey(document, i % 2 === 0 ? "y" : "n");
      pressKey(document, i % 3 === 0 ? "l" : "h");
      const before = app.judgedCount;
      pressKey(document, "Enter");
      // wait for the submit + next-packet round trip
      for (let tick = 0; tick < 400 && app.judgedCount === before; tick++) {
        await new Promise((r) => setTimeout(r, 10));
      }
      expect(app.judgedCount).toBe(before + 1);
    }

    expect(scannedPackets).toBe(120);
    expect(root.querySelector(".done-screen")).not.toBeNull();

    // the server-side log now holds 120 well-formed judgment lines
    const log = readFileSync(join(fixtureDir, "judgments.jsonl"), "utf-8")
      .trim().split("\n");
    expect(log.length).toBe(120);
    for (const line of log) {
      const payload = JSON.parse(line);
      expect(payload.reviewer).toBe("console-reviewer");
      expect(["diabetic", "not_diabetic"]).toContain(payload.verdict);
      expect(["high", "low"]).toContain(payload.confidence);
      expect(typeof payload.timestamp).toBe("number");
      expect(meta.p_by_token[payload.token]).toBeDefined();
      seenTokens.add(payload.token);
    }
    expect(seenTokens.size).toBe(120);
    app.stop();
  }, 120_000);

  it("reports reviewer progress through the service", async () => {
    const response = await fetch(`${BASE}/progress`);
    const body = await response.json();
    expect(body.per_reviewer["console-reviewer"]).toBe(120);
    expect(body.per_bin).toBeUndefined(); // blinded: no bins without owner mode
  });
});
