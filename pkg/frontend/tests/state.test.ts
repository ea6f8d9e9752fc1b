import { describe, expect, it } from "vitest";

import {
  CATEGORIES,
  clearAnswers,
  initialState,
  isSubmittable,
  loadVolume,
  prefetchIndices,
  scrollSlices,
  selectAnswer,
} from "../src/state.js";

function volumeState(depth = 32) {
  return loadVolume(initialState(), "vol_0", depth, 3, 10);
}

describe("scrollSlices", () => {
  it("clamps at the last slice", () => {
    let s = volumeState(8);
    s = { ...s, sliceIndex: 7 };
    expect(scrollSlices(s, +1).sliceIndex).toBe(7);
  });

  it("clamps at slice zero", () => {
    const s = volumeState(8);
    expect(scrollSlices(s, -1).sliceIndex).toBe(0);
  });

  it("accumulates wheel deltas: +5 from slice 3 on depth 32 lands on 8", () => {
    let s = { ...volumeState(32), sliceIndex: 3 };
    for (let i = 0; i < 5; i++) s = scrollSlices(s, +1);
    expect(s.sliceIndex).toBe(8);
  });

  it("same delta gives the same transition regardless of input device", () => {
    const s = { ...volumeState(16), sliceIndex: 5 };
    const viaWheel = scrollSlices(s, +2);
    const viaKeys = scrollSlices(scrollSlices(s, +1), +1);
    const viaSlider = scrollSlices(s, 7 - 5);
    expect(viaWheel.sliceIndex).toBe(7);
    expect(viaKeys.sliceIndex).toBe(7);
    expect(viaSlider.sliceIndex).toBe(7);
  });
});

describe("answers and submit gating", () => {
  it("is not submittable until all three categories are answered", () => {
    let s = volumeState();
    expect(isSubmittable(s)).toBe(false);
    s = selectAnswer(s, "realistic_appearance", "C");
    s = selectAnswer(s, "slice_consistency", "D");
    expect(isSubmittable(s)).toBe(false);
    s = selectAnswer(s, "anatomical_correctness", "B");
    expect(isSubmittable(s)).toBe(true);
  });

  it("clearing answers resets the gate", () => {
    let s = volumeState();
    for (const c of CATEGORIES) s = selectAnswer(s, c, "A");
    expect(isSubmittable(clearAnswers(s))).toBe(false);
  });

  it("re-selecting a category replaces the previous option", () => {
    let s = volumeState();
    s = selectAnswer(s, "slice_consistency", "A");
    s = selectAnswer(s, "slice_consistency", "D");
    expect(s.answers.slice_consistency).toBe("D");
  });
});

describe("prefetchIndices", () => {
  it("covers +-2 around the middle", () => {
    const s = { ...volumeState(32), sliceIndex: 10 };
    expect(prefetchIndices(s)).toEqual([8, 9, 10, 11, 12]);
  });

  it("clips at the boundaries", () => {
    const s = volumeState(32);
    expect(prefetchIndices(s)).toEqual([0, 1, 2]);
    const end = { ...volumeState(4), sliceIndex: 3 };
    expect(prefetchIndices(end)).toEqual([1, 2, 3]);
  });
});
