// Session flow state machine. The service is forward-only and idempotent
// on reads, so every transition re-derives its view from the server:
// refresh-resume is just "create (idempotent) + next".

import { Answer, ApiError, ItemPayload, Report, VttApi } from "./api.js";

export type FlowState =
  | { kind: "idle" }
  | { kind: "loading"; message: string }
  | { kind: "item"; sessionId: string; item: ItemPayload; submitting: boolean }
  | { kind: "completed"; sessionId: string; report: Report }
  | { kind: "error"; message: string; retry: (() => Promise<void>) | null };

export type FlowListener = (state: FlowState) => void;

export class SessionFlow {
  private state: FlowState = { kind: "idle" };
  private sessionId: string | null = null;
  private testId = 1;
  private inFlight = false;

  constructor(
    private readonly api: VttApi,
    private readonly listener: FlowListener,
  ) {}

  current(): FlowState {
    return this.state;
  }

  private setState(state: FlowState): void {
    this.state = state;
    this.listener(state);
  }

  /** Create (or resume) a session and show its current item. */
  async start(raterId: string, testId: number, seed = 0): Promise<void> {
    this.testId = testId;
    this.setState({ kind: "loading", message: "starting session" });
    try {
      const session = await this.api.createSession(raterId, testId, seed);
      this.sessionId = session.session_id;
      await this.showNext();
    } catch (err) {
      this.fail(err, () => this.start(raterId, testId, seed));
    }
  }

  /** Re-fetch the current item; used on load failures and after refresh. */
  async showNext(): Promise<void> {
    const sessionId = this.sessionId;
    if (sessionId === null) {
      return;
    }
    try {
      const item = await this.api.nextItem(sessionId);
      if (item.completed) {
        const report = await this.api.report(this.testId);
        this.setState({ kind: "completed", sessionId, report });
      } else {
        this.setState({ kind: "item", sessionId, item, submitting: false });
      }
    } catch (err) {
      this.fail(err, () => this.showNext());
    }
  }

  /**
   * Submit the answer for the item on screen. Re-entrant calls while a
   * submission is in flight are dropped, so a double click produces one
   * request.
   */
  async answer(answer: Answer): Promise<void> {
    if (this.state.kind !== "item" || this.inFlight) {
      return;
    }
    const { sessionId, item } = this.state;
    if (!item.item_id) {
      return;
    }
    this.inFlight = true;
    this.setState({ ...this.state, submitting: true });
    try {
      await this.api.submitAnswer(sessionId, item.item_id, answer);
      this.inFlight = false;
      await this.showNext();
    } catch (err) {
      this.inFlight = false;
      if (err instanceof ApiError && err.status === 409) {
        // duplicate or out-of-order: the server state wins, re-sync
        await this.showNext();
        return;
      }
      this.fail(err, () => this.showNext());
    }
  }

  private fail(err: unknown, retry: (() => Promise<void>) | null): void {
    const message = err instanceof Error ? err.message : String(err);
    this.setState({ kind: "error", message, retry });
  }
}
