import { ReviewApi } from "./api.js";
import { ConsoleApp } from "./app.js";

function config(): { base: string; token: string } {
  let base = localStorage.getItem("phenoaudit_api_base");
  if (!base) {
    base = window.prompt("Review API base URL", "http://127.0.0.1:8350") ?? "";
    localStorage.setItem("phenoaudit_api_base", base);
  }
  let token = localStorage.getItem("phenoaudit_reviewer_token");
  if (!token) {
    token = window.prompt("Reviewer token") ?? "";
    localStorage.setItem("phenoaudit_reviewer_token", token);
  }
  return { base, token };
}

const root = document.getElementById("app");
if (root) {
  const { base, token } = config();
  const app = new ConsoleApp({
    root,
    api: new ReviewApi(base, token),
    doc: document,
    storage: localStorage,
    win: window,
  });
  app.start().catch((err) => {
    if (err?.name === "AuthError") {
      localStorage.removeItem("phenoaudit_reviewer_token");
      root.textContent = "Token rejected - reload to enter a new one.";
    } else {
      root.textContent = `Failed to start: ${err}`;
    }
  });
}
