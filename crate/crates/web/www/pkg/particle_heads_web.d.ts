/* tslint:disable */
/* eslint-disable */

export class Flow {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Distance to the limit point at each sample time.
     */
    distance(): Float64Array;
    /**
     * Convergence class and fitted rate or exponent.
     */
    label(): string;
    times(): Float64Array;
}

export class Simulation {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Advance `n` steps and return the total energy afterwards.
     */
    advance(n: number): number;
    diameter(): number;
    energy(): number;
    /**
     * Random non-overlapping start in a `width × height` box.
     */
    constructor(particles: number, width: number, height: number, damping: number, seed: number);
    /**
     * Interleaved `x, y` centres.
     */
    positions(): Float32Array;
    steps(): number;
}

/**
 * Magnetisation `m(r)` for `r` in `[r_min, r_max]` with `β = 1/(1+r)` (so `r > -1`),
 * returned as interleaved `r, m` pairs.
 */
export function ising_curve(r_min: number, r_max: number, count: number): Float64Array;

/**
 * Slope of `ln m` against `ln |r|` over `|r|` in `[near, far]`.
 */
export function ising_scan_slope(near: number, far: number): number;

/**
 * Gradient flow of `r x²/2 + x⁴/4` from `x0`, sampled log-uniformly on `[1, horizon]`.
 */
export function pitchfork_flow(r: number, x0: number, horizon: number): Flow;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_flow_free: (a: number, b: number) => void;
    readonly __wbg_simulation_free: (a: number, b: number) => void;
    readonly flow_distance: (a: number) => [number, number];
    readonly flow_label: (a: number) => [number, number];
    readonly flow_times: (a: number) => [number, number];
    readonly ising_curve: (a: number, b: number, c: number) => [number, number, number, number];
    readonly ising_scan_slope: (a: number, b: number) => [number, number, number];
    readonly pitchfork_flow: (a: number, b: number, c: number) => [number, number, number];
    readonly simulation_advance: (a: number, b: number) => [number, number, number];
    readonly simulation_diameter: (a: number) => number;
    readonly simulation_energy: (a: number) => number;
    readonly simulation_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly simulation_positions: (a: number) => [number, number];
    readonly simulation_steps: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
