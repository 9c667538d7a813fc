# Runtime modules package
