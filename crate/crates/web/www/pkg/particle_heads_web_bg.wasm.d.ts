/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_flow_free: (a: number, b: number) => void;
export const __wbg_simulation_free: (a: number, b: number) => void;
export const flow_distance: (a: number) => [number, number];
export const flow_label: (a: number) => [number, number];
export const flow_times: (a: number) => [number, number];
export const ising_curve: (a: number, b: number, c: number) => [number, number, number, number];
export const ising_scan_slope: (a: number, b: number) => [number, number, number];
export const pitchfork_flow: (a: number, b: number, c: number) => [number, number, number];
export const simulation_advance: (a: number, b: number) => [number, number, number];
export const simulation_diameter: (a: number) => number;
export const simulation_energy: (a: number) => number;
export const simulation_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const simulation_positions: (a: number) => [number, number];
export const simulation_steps: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
