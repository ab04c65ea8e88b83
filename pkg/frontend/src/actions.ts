import type { ActionStep } from "./api.js";

/** Keyboard bindings: WASD strafes/advances, E/Q move vertically, and the
 * arrow keys re-aim the camera. Letter keys match case-insensitively. */
export const KEY_TO_ACTION: Readonly<Record<string, string>> = {
  w: "move_forward",
  s: "move_backward",
  a: "move_left",
  d: "move_right",
  e: "move_up",
  q: "move_down",
  ArrowUp: "orient_up",
  ArrowDown: "orient_down",
  ArrowLeft: "orient_left",
  ArrowRight: "orient_right",
};

/** Map a keydown to an action step, or null for keys that have no binding
 * (those are ignored rather than treated as errors). */
export function keyToAction(key: string, repeat: number): ActionStep | null {
  const name = key.length === 1 ? KEY_TO_ACTION[key.toLowerCase()] : KEY_TO_ACTION[key];
  if (name === undefined) return null;
  return { action: name, repeat };
}

/** Serialize a history to the script format the CLI accepts: one
 * "action repeat" pair per line, newline-terminated like any script file. */
export function formatScript(steps: readonly ActionStep[]): string {
  if (steps.length === 0) return "";
  return steps.map((s) => `${s.action} ${s.repeat}`).join("\n") + "\n";
}
