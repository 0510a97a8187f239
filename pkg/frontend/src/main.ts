import { ApiClient } from './api.js';
import { ConsoleStore } from './store.js';
import { ConsoleApp } from './ui.js';

const store = new ConsoleStore(new ApiClient(''));
new ConsoleApp(document.getElementById('app') as HTMLElement, store);
store.start();
