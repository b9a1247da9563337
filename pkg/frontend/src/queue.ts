/** FIFO queue that keeps at most one mutation in flight; later clicks wait
 * for the earlier ones so the server sees them in placement order. */

export class MutationQueue {
  private chain: Promise<void> = Promise.resolve();
  private pending = 0;

  get inFlight(): boolean {
    return this.pending > 0;
  }

  enqueue<T>(task: () => Promise<T>): Promise<T> {
    this.pending += 1;
    const run = this.chain.then(task);
    this.chain = run.then(
      () => {
        this.pending -= 1;
      },
      () => {
        this.pending -= 1;
      },
    );
    return run;
  }
}
