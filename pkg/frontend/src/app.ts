/** Controller: wires the REST client to a renderer through the view state.
 * The DOM layer implements Renderer; scripted tests drive this class with a
 * recording renderer against a live service. */

import { ApiError, SessionApi } from "./api.js";
import type { Polarity } from "./api.js";
import { MutationQueue } from "./queue.js";
import type { Badge, Marker, ViewState } from "./state.js";
import { badges, fromSummary, initialState, overlayStale, undoAvailable,
         withClickAck, withClickRejected, withMode, withOpacity, withPainted,
         withPendingMarker, withPropagation, withSlice,
         withUndoAck } from "./state.js";
import { canvasToPixel } from "./overlay.js";

export interface Renderer {
  paintBase(slice: number): void;
  /** Called with the exact PNG bytes of the acknowledged mask version. */
  paintOverlay(slice: number, maskPng: Uint8Array, version: number,
               opacity: number): void;
  paintMarkers(slice: number, markers: Marker[]): void;
  renderBadges(items: Badge[]): void;
  setBusy(busy: boolean): void;
  setUndoEnabled(enabled: boolean): void;
  showError(message: string, retry?: () => void): void;
}

export class AnnotatorApp {
  state: ViewState;
  private queue = new MutationQueue();

  constructor(private api: SessionApi, private renderer: Renderer) {
    this.state = initialState("", "image", 1, 0, 0);
  }

  async openRawVolume(rawB64: string, depth: number, height: number,
                      width: number): Promise<void> {
    const sid = await this.api.createRawVolumeSession(rawB64, depth, height,
                                                      width);
    this.state = initialState(sid, "volume", depth, height, width);
    this.renderer.paintBase(0);
    await this.refreshOverlay(0);
    this.sync();
  }

  async openImage(pngB64: string, height: number, width: number):
      Promise<void> {
    const sid = await this.api.createImageSession(pngB64);
    this.state = initialState(sid, "image", 1, height, width);
    this.renderer.paintBase(0);
    await this.refreshOverlay(0);
    this.sync();
  }

  /** Rebuild everything from the server (refresh-safe path). */
  async reload(sessionId: string): Promise<void> {
    const summary = await this.api.getSession(sessionId);
    this.state = fromSummary(summary);
    this.renderer.paintBase(this.state.activeSlice);
    await this.refreshOverlay(this.state.activeSlice);
    this.sync();
  }

  clickCanvas(x: number, y: number, canvasW: number, canvasH: number,
              polarity?: Polarity): Promise<void> {
    const pixel = canvasToPixel(x, y, canvasW, canvasH, this.state.width,
                                this.state.height);
    if (pixel === null) return Promise.resolve();  // out-of-canvas release
    return this.clickPixel(pixel.row, pixel.col, polarity);
  }

  clickPixel(row: number, col: number, polarity?: Polarity): Promise<void> {
    const slice = this.state.activeSlice;
    const mode = polarity ?? this.state.clickMode;
    this.state = withPendingMarker(this.state, slice, row, col, mode);
    this.renderer.paintMarkers(slice, this.state.markers[slice] ?? []);
    this.renderer.setBusy(true);
    return this.queue.enqueue(async () => {
      try {
        const version = await this.api.addClick(this.state.sessionId, slice,
                                                row, col, mode);
        this.state = withClickAck(this.state, slice, version);
        await this.refreshOverlay(slice, version);
      } catch (err) {
        this.state = withClickRejected(this.state, slice);
        this.renderer.paintMarkers(slice, this.state.markers[slice] ?? []);
        if (err instanceof ApiError) {
          this.renderer.showError(err.message);
        } else {
          this.renderer.showError("network failure while sending click",
                                  () => void this.clickPixel(row, col, mode));
        }
      } finally {
        this.renderer.setBusy(this.queue.inFlight);
        this.sync();
      }
    });
  }

  undo(): Promise<void> {
    const slice = this.state.activeSlice;
    return this.queue.enqueue(async () => {
      try {
        const version = await this.api.undoLast(this.state.sessionId, slice);
        this.state = withUndoAck(this.state, slice, version);
        await this.refreshOverlay(slice, version);
      } catch (err) {
        if (err instanceof ApiError && err.status === 409) {
          this.renderer.setUndoEnabled(false);
        } else {
          this.renderer.showError(String(err));
        }
      } finally {
        this.renderer.setBusy(this.queue.inFlight);
        this.sync();
      }
    });
  }

  propagate(): Promise<void> {
    return this.queue.enqueue(async () => {
      try {
        const info = await this.api.propagate(this.state.sessionId);
        const summary = await this.api.getSession(this.state.sessionId);
        const versions: Record<number, number> = {};
        for (const [k, v] of Object.entries(summary.mask_versions)) {
          versions[Number(k)] = v;
        }
        this.state = withPropagation(this.state, info.provenance, versions);
        await this.refreshOverlay(this.state.activeSlice);
      } catch (err) {
        if (err instanceof ApiError && err.status === 409) {
          this.renderer.showError("no seed slices: click at least one slice");
        } else {
          this.renderer.showError(String(err));
        }
      } finally {
        this.renderer.setBusy(this.queue.inFlight);
        this.sync();
      }
    });
  }

  async setSlice(slice: number): Promise<void> {
    this.state = withSlice(this.state, slice);
    this.renderer.paintBase(this.state.activeSlice);
    await this.refreshOverlay(this.state.activeSlice);
    this.sync();
  }

  setMode(mode: Polarity): void {
    this.state = withMode(this.state, mode);
  }

  setOpacity(opacity: number): void {
    this.state = withOpacity(this.state, opacity);
    void this.refreshOverlay(this.state.activeSlice,
                             this.state.paintedVersions[this.state.activeSlice]);
  }

  /** Fetch and paint a mask version (default: latest acknowledged). */
  private async refreshOverlay(slice: number, version?: number): Promise<void> {
    const fetched = await this.api.fetchMask(this.state.sessionId, slice,
                                             version);
    this.state = { ...this.state };
    this.state = withPainted(this.state, slice, fetched.version);
    if (!(slice in this.state.maskVersions)) {
      this.state.maskVersions[slice] = fetched.version;
    }
    this.renderer.paintOverlay(slice, fetched.bytes, fetched.version,
                               this.state.overlayOpacity);
    this.renderer.paintMarkers(slice, this.state.markers[slice] ?? []);
  }

  get overlayIsStale(): boolean {
    return overlayStale(this.state, this.state.activeSlice);
  }

  private sync(): void {
    this.renderer.renderBadges(badges(this.state));
    this.renderer.setUndoEnabled(
      undoAvailable(this.state, this.state.activeSlice));
  }
}
