import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";
import { DeformScheduler, type DeformRequest, type DeformResponse } from "../src/api.js";

function response(tag: number): DeformResponse {
  return {
    image_pgm: String(tag),
    contours_original: [],
    contours_deformed: [],
    jacobian_stats: { min_det: 1, fold_fraction: 0 },
  };
}

describe("DeformScheduler", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  it("debounces rapid slider updates into the last request", async () => {
    const sent: DeformRequest[] = [];
    const sched = new DeformScheduler(
      async (req) => {
        sent.push(req);
        return response(req.coefficients[0]);
      },
      () => undefined,
    );
    for (let v = 0; v < 20; v++) {
      sched.request({ subject_id: "s", coefficients: [v], axis: 0, slice_index: 0 });
      vi.advanceTimersByTime(40); // faster than the 150 ms debounce
    }
    vi.advanceTimersByTime(200);
    await vi.runAllTimersAsync();
    expect(sent.length).toBe(1);
    expect(sent[0].coefficients[0]).toBe(19);
  });

  it("drops stale responses that resolve after a newer dispatch", async () => {
    const resolvers: ((r: DeformResponse) => void)[] = [];
    const delivered: string[] = [];
    const sched = new DeformScheduler(
      (req) => new Promise<DeformResponse>((resolve) => {
        resolvers.push((r) => resolve({ ...r, image_pgm: String(req.coefficients[0]) }));
      }),
      (resp) => delivered.push(resp.image_pgm),
    );
    sched.dispatch({ subject_id: "s", coefficients: [1], axis: 0, slice_index: 0 });
    sched.dispatch({ subject_id: "s", coefficients: [2], axis: 0, slice_index: 0 });
    // the newer request resolves first; the older one arrives late and is stale
    resolvers[1](response(0));
    await Promise.resolve();
    resolvers[0](response(0));
    await Promise.resolve();
    expect(delivered).toEqual(["2"]);
  });

  it("aborts the in-flight request when a newer one dispatches", async () => {
    const signals: (AbortSignal | undefined)[] = [];
    const sched = new DeformScheduler(
      (req, signal) => {
        signals.push(signal);
        return new Promise<DeformResponse>(() => undefined); // never resolves
      },
      () => undefined,
    );
    sched.dispatch({ subject_id: "s", coefficients: [1], axis: 0, slice_index: 0 });
    sched.dispatch({ subject_id: "s", coefficients: [2], axis: 0, slice_index: 0 });
    expect(signals.length).toBe(2);
    expect(signals[0]?.aborted).toBe(true);
    expect(signals[1]?.aborted).toBe(false);
  });

  it("reports errors only for the newest request", async () => {
    const errors: unknown[] = [];
    const sched = new DeformScheduler(
      async () => {
        throw new Error("boom");
      },
      () => undefined,
      (e) => errors.push(e),
    );
    sched.dispatch({ subject_id: "s", coefficients: [1], axis: 0, slice_index: 0 });
    await vi.runAllTimersAsync();
    expect(errors.length).toBe(1);
  });
});
