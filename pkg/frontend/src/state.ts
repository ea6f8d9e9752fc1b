// Viewer state machine. All transitions are pure functions, so keyboard,
// wheel and slider input produce identical state changes for equal deltas.

import type { Category, Option } from "./api.js";

export const CATEGORIES: Category[] = [
  "realistic_appearance",
  "slice_consistency",
  "anatomical_correctness",
];

export interface ViewerState {
  volumeId: string | null;
  sliceIndex: number;
  depth: number;
  window: [number, number];
  answers: Partial<Record<Category, Option>>;
  completed: number;
  total: number;
}

export function initialState(): ViewerState {
  return {
    volumeId: null,
    sliceIndex: 0,
    depth: 1,
    window: [-1, 1],
    answers: {},
    completed: 0,
    total: 0,
  };
}

export function loadVolume(state: ViewerState, volumeId: string, depth: number,
                           completed: number, total: number): ViewerState {
  return { ...state, volumeId, depth, sliceIndex: 0, answers: {}, completed, total };
}

export function scrollSlices(state: ViewerState, delta: number): ViewerState {
  const next = Math.min(Math.max(state.sliceIndex + delta, 0), state.depth - 1);
  return next === state.sliceIndex ? state : { ...state, sliceIndex: next };
}

export function selectAnswer(state: ViewerState, category: Category,
                             option: Option): ViewerState {
  return { ...state, answers: { ...state.answers, [category]: option } };
}

export function restoreAnswers(state: ViewerState,
                               answers: Partial<Record<Category, Option>>): ViewerState {
  return { ...state, answers: { ...answers } };
}

export function isSubmittable(state: ViewerState): boolean {
  return state.volumeId !== null && CATEGORIES.every((c) => state.answers[c] !== undefined);
}

export function clearAnswers(state: ViewerState): ViewerState {
  return { ...state, answers: {} };
}

// Slices worth having in cache around the current position (current +-2).
export function prefetchIndices(state: ViewerState): number[] {
  const out: number[] = [];
  for (let d = -2; d <= 2; d++) {
    const k = state.sliceIndex + d;
    if (k >= 0 && k < state.depth && !out.includes(k)) out.push(k);
  }
  return out;
}
