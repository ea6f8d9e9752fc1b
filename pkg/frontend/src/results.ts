// Results dashboard: one chart group per category, bars per option per
// dataset (or per option only in single-reader view). Rendered counts come
// straight from the /results payload; computeTotals exists so tests can
// assert DOM totals equal payload totals.

import type { Option, OptionCounts, ResultsPayload } from "./api.js";
import { CATEGORIES } from "./state.js";

const OPTIONS: Option[] = ["A", "B", "C", "D"];

export function computeTotals(payload: ResultsPayload): number {
  let total = 0;
  for (const perCategory of Object.values(payload.counts)) {
    for (const perOption of Object.values(perCategory)) {
      for (const n of Object.values(perOption ?? {})) total += n ?? 0;
    }
  }
  return total;
}

function maxCount(groups: Record<string, OptionCounts>): number {
  let max = 0;
  for (const counts of Object.values(groups)) {
    for (const n of Object.values(counts)) max = Math.max(max, n ?? 0);
  }
  return max;
}

function barGroup(doc: Document, label: string, counts: OptionCounts,
                  scale: number): HTMLElement {
  const group = doc.createElement("div");
  group.className = "bar-group";
  group.dataset.group = label;
  const caption = doc.createElement("div");
  caption.className = "bar-group-label";
  caption.textContent = label;
  group.appendChild(caption);
  const bars = doc.createElement("div");
  bars.className = "bars";
  for (const option of OPTIONS) {
    const count = counts[option] ?? 0;
    const bar = doc.createElement("div");
    bar.className = "bar";
    bar.dataset.option = option;
    bar.dataset.count = String(count);
    bar.style.height = scale > 0 ? `${(count / scale) * 120}px` : "0px";
    bar.title = `${option}: ${count}`;
    const tag = doc.createElement("span");
    tag.className = "bar-count";
    tag.textContent = `${option} ${count}`;
    bar.appendChild(tag);
    bars.appendChild(bar);
  }
  group.appendChild(bars);
  return group;
}

export function renderResults(doc: Document, container: HTMLElement,
                              payload: ResultsPayload,
                              reader: string | null = null): void {
  container.textContent = "";
  container.dataset.total = String(payload.total);

  const heading = doc.createElement("p");
  heading.className = "results-total";
  heading.textContent = reader
    ? `${payload.total} ratings in total; showing reader ${reader}`
    : `${payload.total} ratings in total`;
  container.appendChild(heading);

  for (const category of CATEGORIES) {
    const section = doc.createElement("section");
    section.className = "category-chart";
    section.dataset.category = category;
    const title = doc.createElement("h3");
    title.textContent = category.replace(/_/g, " ");
    section.appendChild(title);

    let groups: Record<string, OptionCounts>;
    if (reader) {
      groups = { [reader]: payload.per_reader[reader]?.[category] ?? {} };
    } else {
      groups = {};
      for (const [dataset, perCategory] of Object.entries(payload.counts)) {
        groups[dataset || "all"] = perCategory[category] ?? {};
      }
      if (Object.keys(groups).length === 0) groups = { all: {} };
    }

    const scale = maxCount(groups);
    const chart = doc.createElement("div");
    chart.className = "chart";
    for (const [label, counts] of Object.entries(groups)) {
      chart.appendChild(barGroup(doc, label, counts, scale));
    }
    section.appendChild(chart);
    container.appendChild(section);
  }
}

export function domTotal(container: HTMLElement): number {
  let total = 0;
  container.querySelectorAll<HTMLElement>(".bar").forEach((bar) => {
    // per-dataset view only: the single-reader view re-plots the same ratings
    total += Number(bar.dataset.count ?? 0);
  });
  return total;
}
