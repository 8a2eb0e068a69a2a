/** Keyboard-first interaction: map key events to viewer actions.
 * Arrows scrub slices, O toggles the overlay, 1/2/3 rate the area map,
 * shift+1/2/3 rate the slice map, Enter submits. */

import type { RatingLevel } from "./types.js";

export type ViewerAction =
  | { kind: "step"; delta: -1 | 1 }
  | { kind: "toggle_overlay" }
  | { kind: "rate"; target: "area" | "slice"; level: RatingLevel }
  | { kind: "submit" };

export interface KeyboardEventLike {
  key: string;
  code: string;
  shiftKey: boolean;
}

const DIGIT_LEVELS: Record<string, RatingLevel> = {
  Digit1: "good",
  Digit2: "moderate",
  Digit3: "bad",
};

export function mapKey(event: KeyboardEventLike): ViewerAction | null {
  if (event.key === "ArrowLeft") return { kind: "step", delta: -1 };
  if (event.key === "ArrowRight") return { kind: "step", delta: 1 };
  if (event.key === "o" || event.key === "O") return { kind: "toggle_overlay" };
  if (event.key === "Enter") return { kind: "submit" };
  // shifted digits change `key` ("!", "@", ...) so match on the code
  const level = DIGIT_LEVELS[event.code];
  if (level) {
    return { kind: "rate", target: event.shiftKey ? "slice" : "area", level };
  }
  return null;
}
