import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node",
    include: ["tests/**/*.test.ts"],
    // the integration suite generates data, trains a toy checkpoint, and
    // boots the real service before its first assertion
    testTimeout: 20_000,
    hookTimeout: 240_000,
  },
});
