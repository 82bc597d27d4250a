import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "happy-dom",
    environmentOptions: {
      // same origin as the e2e review service so its happy-dom window can
      // fetch it; unit tests never touch the network
      happyDOM: { url: "http://127.0.0.1:8461" },
    },
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
