// Explorer view state and its URL round trip. The state deliberately holds
// everything needed to reproduce a view, so a copied URL is a deep link.

export interface ExplorerState {
  subject: string;
  coefficients: number[];
  axis: number;
  sliceIndex: number;
  showAll: boolean;
}

export const SLIDER_RANGE = 300; // covers the published sweep values of +/-200
export const PRESET_LAMBDAS = [-200, -100, 0, 100, 200];
export const DEFAULT_VISIBLE = 10;

export function initialState(subject: string, k: number, sliceIndex: number): ExplorerState {
  return {
    subject,
    coefficients: new Array(k).fill(0),
    axis: 0,
    sliceIndex,
    showAll: false,
  };
}

export function clampCoefficient(value: number): number {
  if (Number.isNaN(value)) return 0;
  return Math.min(SLIDER_RANGE, Math.max(-SLIDER_RANGE, value));
}

export function setCoefficient(state: ExplorerState, index: number, value: number): ExplorerState {
  const coefficients = state.coefficients.slice();
  coefficients[index] = clampCoefficient(value);
  return { ...state, coefficients };
}

export function resetCoefficients(state: ExplorerState): ExplorerState {
  return { ...state, coefficients: state.coefficients.map(() => 0) };
}

export function applyPreset(state: ExplorerState, index: number, lambda: number): ExplorerState {
  return setCoefficient(resetCoefficients(state), index, lambda);
}

export function visibleCount(state: ExplorerState): number {
  return state.showAll ? state.coefficients.length
    : Math.min(DEFAULT_VISIBLE, state.coefficients.length);
}

// URL codec: compact comma-joined coefficients, numbers kept exact via the
// default JS number formatting (round-trips through parseFloat).
export function encodeState(state: ExplorerState): string {
  const params = new URLSearchParams();
  params.set("subject", state.subject);
  params.set("coeffs", state.coefficients.join(","));
  params.set("axis", String(state.axis));
  params.set("slice", String(state.sliceIndex));
  if (state.showAll) params.set("all", "1");
  return params.toString();
}

export function decodeState(query: string, k: number): ExplorerState | null {
  const params = new URLSearchParams(query);
  const subject = params.get("subject");
  if (!subject) return null;
  const coeffs = (params.get("coeffs") ?? "")
    .split(",")
    .filter((s) => s.length > 0)
    .map((s) => clampCoefficient(parseFloat(s)));
  while (coeffs.length < k) coeffs.push(0);
  return {
    subject,
    coefficients: coeffs.slice(0, k),
    axis: Number(params.get("axis") ?? 0),
    sliceIndex: Number(params.get("slice") ?? 0),
    showAll: params.get("all") === "1",
  };
}
