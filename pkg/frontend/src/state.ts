/**
 * Session state and its reducer. The state is the single source of truth
 * for what the panels render; history is append-only within the session,
 * and explain responses that arrive after a newer request are dropped by
 * sequence number.
 */

import type { ExplainResponse, TopkEntry } from "./api";

export interface HistoryCard {
  seq: number;
  klass: string;
  method: string;
  alpha: number;
  response: ExplainResponse;
}

export interface SessionState {
  classes: string[];
  imageB64: string | null;
  imageName: string | null;
  prediction: TopkEntry[] | null;
  method: string;
  klass: string | null; // null: let the service pick top-1
  alpha: number;
  history: HistoryCard[];
  nextSeq: number;
  inflightSeq: number | null;
  notice: string | null;
}

export function initialState(classes: string[] = []): SessionState {
  return {
    classes,
    imageB64: null,
    imageName: null,
    prediction: null,
    method: "gradcam",
    klass: null,
    alpha: 0.5,
    history: [],
    nextSeq: 1,
    inflightSeq: null,
    notice: null,
  };
}

export type Action =
  | { kind: "classes"; classes: string[] }
  | { kind: "image"; b64: string; name: string }
  | { kind: "prediction"; topk: TopkEntry[] }
  | { kind: "method"; method: string }
  | { kind: "class"; klass: string | null }
  | { kind: "alpha"; alpha: number }
  | { kind: "explain-start" }
  | { kind: "explain-done"; seq: number; card: HistoryCard }
  | { kind: "explain-error"; seq: number; message: string }
  | { kind: "notice"; message: string | null };

export function reduce(state: SessionState, action: Action): SessionState {
  switch (action.kind) {
    case "classes":
      return { ...state, classes: action.classes };
    case "image":
      // a fresh image invalidates the prediction but keeps history:
      // the session is an exploration log
      return {
        ...state,
        imageB64: action.b64,
        imageName: action.name,
        prediction: null,
        notice: null,
      };
    case "prediction":
      return { ...state, prediction: action.topk };
    case "method":
      return { ...state, method: action.method };
    case "class":
      return { ...state, klass: action.klass };
    case "alpha":
      return { ...state, alpha: action.alpha };
    case "explain-start": {
      const seq = state.nextSeq;
      return { ...state, nextSeq: seq + 1, inflightSeq: seq, notice: null };
    }
    case "explain-done":
      if (action.seq !== state.inflightSeq) {
        return state; // superseded response; drop it
      }
      return {
        ...state,
        inflightSeq: null,
        history: [...state.history, action.card],
      };
    case "explain-error":
      if (action.seq !== state.inflightSeq) {
        return state;
      }
      return { ...state, inflightSeq: null, notice: action.message };
    case "notice":
      return { ...state, notice: action.message };
  }
}

/** Explain controls stay disabled until an image is uploaded. */
export function canExplain(state: SessionState): boolean {
  return state.imageB64 !== null && state.inflightSeq === null;
}
