/**
 * Rate limiter for streaming interaction messages: at most `ratePerSec`
 * emits per second, always keeping the latest value.  `flush` delivers the
 * final pending value immediately (used on pointer release so the last
 * position is authoritative).
 */
export class Throttle<T> {
  private readonly minInterval: number;
  private lastEmit = -Infinity;
  private pending: T | undefined;
  private hasPending = false;

  constructor(
    ratePerSec: number,
    private readonly emit: (value: T) => void,
    private readonly now: () => number = () => Date.now(),
  ) {
    if (!(ratePerSec > 0)) throw new RangeError("rate must be > 0");
    this.minInterval = 1000 / ratePerSec;
  }

  push(value: T): void {
    const t = this.now();
    if (t - this.lastEmit >= this.minInterval) {
      this.lastEmit = t;
      this.hasPending = false;
      this.pending = undefined;
      this.emit(value);
    } else {
      this.pending = value;
      this.hasPending = true;
    }
  }

  /** Emit the pending value (if any) regardless of the rate window. */
  flush(): void {
    if (this.hasPending) {
      const value = this.pending as T;
      this.hasPending = false;
      this.pending = undefined;
      this.lastEmit = this.now();
      this.emit(value);
    }
  }

  reset(): void {
    this.lastEmit = -Infinity;
    this.hasPending = false;
    this.pending = undefined;
  }
}
