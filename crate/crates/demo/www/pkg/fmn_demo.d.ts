/* tslint:disable */
/* eslint-disable */

/**
 * A small VAE on weak-signal bars data (collapse-prone without a critic),
 * trained one epoch per [`Trainer::step`].
 */
export class Trainer {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * `critic` is `none`, `nn`, `self` or `hybrid`.
     */
    constructor(critic: string, lambda: number, seed: bigint);
    /**
     * Runs one epoch and returns that epoch's validation metrics.
     */
    step(): string;
}

/**
 * Trains a tabular critic on `joint` for every batch size in `ks`
 * (comma separated) and reports the bound next to `log K` and the exact MI.
 */
export function oracle_sweep(joint: string, ks: string, steps: number, seed: bigint): string;

/**
 * Self-critic score table for `k` one-dimensional posteriors with means
 * `0, spacing, 2 spacing, ...` and a shared standard deviation `sigma`.
 */
export function self_critic_table(k: number, spacing: number, sigma: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_trainer_free: (a: number, b: number) => void;
    readonly oracle_sweep: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly self_critic_table: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly trainer_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
    readonly trainer_step: (a: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
