// Rating screen: slice scroller plus the three Likert questions.
//
// Answers persist to the server the moment they are selected (the server
// upserts on the rating key), so a refresh restores both position and
// pending answers; Submit verifies all three are acknowledged and advances.
// The DOM built here never receives dataset names or any other provenance.

import { ApiClient, Category, Option, StudyInfo } from "./api.js";
import {
  CATEGORIES,
  ViewerState,
  clearAnswers,
  initialState,
  isSubmittable,
  loadVolume,
  prefetchIndices,
  restoreAnswers,
  scrollSlices,
  selectAnswer,
} from "./state.js";

const OPTIONS: Option[] = ["A", "B", "C", "D"];

export class Viewer {
  state: ViewerState = initialState();
  private prefetched = new Map<number, HTMLImageElement>();

  constructor(private doc: Document, private root: HTMLElement,
              private api: ApiClient, private study: StudyInfo,
              private reader: string) {}

  async start(): Promise<void> {
    await this.advance();
  }

  private async advance(): Promise<void> {
    const next = await this.api.next(this.study.study_id, this.reader);
    if (next.done || next.volume_id === null) {
      this.renderDone(next.completed, next.total);
      return;
    }
    const meta = await this.api.volumeMeta(next.volume_id);
    this.state = loadVolume(this.state, next.volume_id, meta.depth,
                            next.completed, next.total);
    const stored = await this.api.answers(this.study.study_id, this.reader, next.volume_id);
    this.state = restoreAnswers(this.state, stored);
    this.prefetched.clear();
    this.render();
  }

  scroll(delta: number): void {
    const before = this.state.sliceIndex;
    this.state = scrollSlices(this.state, delta);
    if (this.state.sliceIndex !== before) this.render();
  }

  async choose(category: Category, option: Option): Promise<void> {
    const previous = this.state;
    this.state = selectAnswer(this.state, category, option);
    this.render();
    try {
      await this.api.submitRating(this.study.study_id, this.reader,
                                  this.state.volumeId!, category, option);
    } catch {
      // roll back the optimistic update and surface a retry affordance
      this.state = previous;
      this.render("Saving the answer failed. Check the connection and pick again.");
    }
  }

  async submit(): Promise<void> {
    if (!isSubmittable(this.state)) return;
    try {
      for (const category of CATEGORIES) {
        await this.api.submitRating(this.study.study_id, this.reader,
                                    this.state.volumeId!, category,
                                    this.state.answers[category]!);
      }
    } catch {
      this.render("Submitting failed; your answers are kept. Try again.");
      return;
    }
    this.state = clearAnswers(this.state);
    await this.advance();
  }

  private renderDone(completed: number, total: number): void {
    this.root.textContent = "";
    const done = this.doc.createElement("p");
    done.className = "done";
    done.textContent = `All volumes rated (${completed}/${total}). Thank you.`;
    this.root.appendChild(done);
  }

  render(notice: string | null = null): void {
    const s = this.state;
    this.root.textContent = "";
    if (s.volumeId === null) return;

    const progress = this.doc.createElement("p");
    progress.className = "progress";
    progress.dataset.completed = String(s.completed);
    progress.textContent = `Volume ${s.completed + 1} of ${s.total}`;
    this.root.appendChild(progress);

    if (notice) {
      const warning = this.doc.createElement("p");
      warning.className = "notice";
      warning.textContent = notice;
      this.root.appendChild(warning);
    }

    const img = this.doc.createElement("img");
    img.className = "slice";
    img.src = this.api.sliceUrl(s.volumeId, s.sliceIndex, s.window);
    img.alt = `slice ${s.sliceIndex + 1} of ${s.depth}`;
    this.root.appendChild(img);

    const label = this.doc.createElement("p");
    label.className = "slice-label";
    label.textContent = `Slice ${s.sliceIndex + 1} / ${s.depth}`;
    this.root.appendChild(label);

    const slider = this.doc.createElement("input");
    slider.type = "range";
    slider.min = "0";
    slider.max = String(s.depth - 1);
    slider.value = String(s.sliceIndex);
    slider.className = "slice-slider";
    slider.addEventListener("input", () => {
      this.scroll(Number(slider.value) - this.state.sliceIndex);
    });
    this.root.appendChild(slider);

    for (const category of CATEGORIES) {
      this.root.appendChild(this.renderQuestion(category));
    }

    const submit = this.doc.createElement("button");
    submit.className = "submit";
    submit.textContent = "Submit ratings";
    submit.disabled = !isSubmittable(s);
    submit.addEventListener("click", () => void this.submit());
    this.root.appendChild(submit);

    this.prefetch();
  }

  private renderQuestion(category: Category): HTMLElement {
    const block = this.doc.createElement("fieldset");
    block.className = "question";
    block.dataset.category = category;
    const legend = this.doc.createElement("legend");
    legend.textContent = category.replace(/_/g, " ");
    block.appendChild(legend);
    for (const option of OPTIONS) {
      const label = this.doc.createElement("label");
      label.className = "option";
      const input = this.doc.createElement("input");
      input.type = "radio";
      input.name = `${this.state.volumeId}-${category}`;
      input.value = option;
      input.checked = this.state.answers[category] === option;
      input.addEventListener("change", () => void this.choose(category, option));
      label.appendChild(input);
      const text = this.doc.createElement("span");
      text.textContent = `${option}: ${this.study.labels[category][option]}`;
      label.appendChild(text);
      block.appendChild(label);
    }
    return block;
  }

  private prefetch(): void {
    for (const k of prefetchIndices(this.state)) {
      if (!this.prefetched.has(k) && this.state.volumeId) {
        const img = this.doc.createElement("img");
        img.src = this.api.sliceUrl(this.state.volumeId, k, this.state.window);
        this.prefetched.set(k, img);
      }
    }
  }

  bindInput(target: { addEventListener: Window["addEventListener"] }): void {
    target.addEventListener("wheel", (event) => {
      this.scroll(Math.sign((event as WheelEvent).deltaY));
    });
    target.addEventListener("keydown", (event) => {
      const key = (event as KeyboardEvent).key;
      if (key === "ArrowUp" || key === "ArrowLeft") this.scroll(-1);
      if (key === "ArrowDown" || key === "ArrowRight") this.scroll(1);
    });
  }
}
