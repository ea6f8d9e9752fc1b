// Entry point: a login form, the rating screen, and the results dashboard.

import { ApiClient } from "./api.js";
import { renderResults } from "./results.js";
import { Viewer } from "./viewer.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

async function startRating(api: ApiClient, studyId: string, reader: string): Promise<void> {
  const study = await api.study(studyId);
  const viewer = new Viewer(document, el("viewer"), api, study, reader);
  viewer.bindInput(window);
  await viewer.start();
  el("rate-view").hidden = false;
}

async function showResults(api: ApiClient, studyId: string): Promise<void> {
  const payload = await api.results(studyId);
  const container = el("results");
  const picker = el<HTMLSelectElement>("reader-picker");
  picker.textContent = "";
  const everyone = document.createElement("option");
  everyone.value = "";
  everyone.textContent = "all readers (by dataset)";
  picker.appendChild(everyone);
  for (const reader of Object.keys(payload.per_reader)) {
    const option = document.createElement("option");
    option.value = reader;
    option.textContent = reader;
    picker.appendChild(option);
  }
  const redraw = () => renderResults(document, container, payload, picker.value || null);
  picker.addEventListener("change", redraw);
  redraw();
  el("results-view").hidden = false;
}

function main(): void {
  const form = el<HTMLFormElement>("login");
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const studyId = el<HTMLInputElement>("study-id").value.trim();
    const reader = el<HTMLInputElement>("reader-id").value.trim();
    const token = el<HTMLInputElement>("reader-token").value.trim() || null;
    const mode = (new FormData(form).get("mode") as string) ?? "rate";
    const api = new ApiClient("", token);
    el("login-view").hidden = true;
    const run = mode === "results"
      ? showResults(api, studyId)
      : startRating(api, studyId, reader);
    run.catch((err) => {
      el("login-view").hidden = false;
      el("login-error").textContent = String(err);
    });
  });
}

main();
