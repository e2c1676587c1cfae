from .simctl.cli import main

raise SystemExit(main())
