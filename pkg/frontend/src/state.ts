/** Client-side session bookkeeping. */

import type { SessionDescriptor } from "./api.js";

export type Phase = "practice" | "test";

export class ClientSessionState {
  readonly id: string;
  readonly nPractice: number;
  readonly nTest: number;
  readonly exposureMs: number;
  cursor: number;
  /** trials whose choice has been accepted by the server */
  private readonly submitted = new Set<number>();

  constructor(descriptor: SessionDescriptor) {
    this.id = descriptor.id;
    this.nPractice = descriptor.n_practice;
    this.nTest = descriptor.n_test;
    this.exposureMs = descriptor.exposure_ms;
    this.cursor = descriptor.cursor;
  }

  get total(): number {
    return this.nPractice + this.nTest;
  }

  get done(): boolean {
    return this.cursor >= this.total;
  }

  phaseOf(index: number): Phase {
    return index < this.nPractice ? "practice" : "test";
  }

  hasSubmitted(index: number): boolean {
    return this.submitted.has(index);
  }

  markSubmitted(index: number): void {
    if (this.submitted.has(index)) {
      throw new Error(`trial ${index} was already submitted`);
    }
    this.submitted.add(index);
    this.cursor = index + 1;
  }
}
