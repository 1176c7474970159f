import { describe, expect, it } from "vitest";
import type { ExplainResponse } from "../src/api";
import {
  canExplain,
  HistoryCard,
  initialState,
  reduce,
  SessionState,
} from "../src/state";

function fakeResponse(klass: string): ExplainResponse {
  return {
    overlay: "b64",
    base: "b64",
    raw_grid: { width: 2, height: 2, values: [0, 0.5, 0.5, 1] },
    meta: {
      method: "gradcam",
      class: klass,
      resolution: "input",
      degenerate: false,
      alpha: 0.5,
    },
  };
}

function card(seq: number, klass: string): HistoryCard {
  return { seq, klass, method: "gradcam", alpha: 0.5,
           response: fakeResponse(klass) };
}

function uploaded(): SessionState {
  let s = initialState(["square", "circle", "cross"]);
  s = reduce(s, { kind: "image", b64: "abc", name: "x.png" });
  return s;
}

describe("gating", () => {
  it("explain is disabled before any upload", () => {
    expect(canExplain(initialState(["a"]))).toBe(false);
  });

  it("explain is enabled after upload, disabled while in flight", () => {
    let s = uploaded();
    expect(canExplain(s)).toBe(true);
    s = reduce(s, { kind: "explain-start" });
    expect(canExplain(s)).toBe(false);
  });
});

describe("history", () => {
  it("appends one card per completed request", () => {
    let s = uploaded();
    for (const klass of ["square", "circle"]) {
      s = reduce(s, { kind: "explain-start" });
      const seq = s.inflightSeq!;
      s = reduce(s, { kind: "explain-done", seq, card: card(seq, klass) });
    }
    expect(s.history.map((c) => c.klass)).toEqual(["square", "circle"]);
  });

  it("keeps history when a new image is uploaded", () => {
    let s = uploaded();
    s = reduce(s, { kind: "explain-start" });
    const seq = s.inflightSeq!;
    s = reduce(s, { kind: "explain-done", seq, card: card(seq, "square") });
    s = reduce(s, { kind: "image", b64: "next", name: "y.png" });
    expect(s.history.length).toBe(1);
    expect(s.prediction).toBeNull();
  });

  it("drops stale responses by sequence number", () => {
    let s = uploaded();
    s = reduce(s, { kind: "explain-start" });
    const stale = s.inflightSeq!;
    // the user fires a newer request before the old response lands
    s = reduce(s, { kind: "explain-start" });
    const fresh = s.inflightSeq!;
    s = reduce(s, { kind: "explain-done", seq: stale,
                    card: card(stale, "square") });
    expect(s.history.length).toBe(0);
    s = reduce(s, { kind: "explain-done", seq: fresh,
                    card: card(fresh, "circle") });
    expect(s.history.map((c) => c.klass)).toEqual(["circle"]);
  });

  it("stale errors are ignored too", () => {
    let s = uploaded();
    s = reduce(s, { kind: "explain-start" });
    const stale = s.inflightSeq!;
    s = reduce(s, { kind: "explain-start" });
    s = reduce(s, { kind: "explain-error", seq: stale, message: "boom" });
    expect(s.notice).toBeNull();
    expect(s.inflightSeq).not.toBeNull();
  });
});

describe("errors", () => {
  it("explain failures surface in the notice area", () => {
    let s = uploaded();
    s = reduce(s, { kind: "explain-start" });
    const seq = s.inflightSeq!;
    s = reduce(s, {
      kind: "explain-error",
      seq,
      message: "cam_inapplicable: layer flatten8 breaks the pattern",
    });
    expect(s.notice).toMatch(/cam_inapplicable/);
    expect(canExplain(s)).toBe(true);
  });
});
